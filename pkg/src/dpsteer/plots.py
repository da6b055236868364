"""Hand-rolled SVG emitters for trajectories and verifier landscapes.

Viewport transform: world (x, y) in the unit square maps to pixels as
px = MARGIN + SIZE*x, py = MARGIN + SIZE*(1 - y)  (y axis flipped).
"""

from __future__ import annotations

import os

import numpy as np

from .env import Door, EnvConfig
from .trajectory import OUTCOME_COLLISION, OUTCOME_SUCCESS, OUTCOME_TIMEOUT

SIZE = 600
MARGIN = 20

OUTCOME_COLORS = {
    OUTCOME_SUCCESS: "#2a9d4f",
    OUTCOME_COLLISION: "#d23f3f",
    OUTCOME_TIMEOUT: "#e0a520",
}


def _px(x: float) -> float:
    return MARGIN + SIZE * x


def _py(y: float) -> float:
    return MARGIN + SIZE * (1.0 - y)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _env_elements(cfg: EnvConfig, background: bool = True) -> list[str]:
    fill = "white" if background else "none"
    parts = [
        f'<rect x="{_f(_px(0))}" y="{_f(_py(1))}" width="{SIZE}" height="{SIZE}" '
        f'fill="{fill}" stroke="black" stroke-width="1.5" class="workspace"/>'
    ]
    xlo, xhi = cfg.wall_band()
    for ylo, yhi in cfg.solid_spans():
        parts.append(
            f'<rect x="{_f(_px(xlo))}" y="{_f(_py(yhi))}" '
            f'width="{_f(SIZE * (xhi - xlo))}" height="{_f(SIZE * (yhi - ylo))}" '
            f'fill="#444" class="wall"/>'
        )
    parts.append(
        f'<circle cx="{_f(_px(cfg.goal_x))}" cy="{_f(_py(cfg.goal_y))}" '
        f'r="{_f(SIZE * cfg.goal_radius)}" fill="none" stroke="#2a9d4f" '
        f'stroke-width="2" class="goal"/>'
    )
    parts.append(
        f'<circle cx="{_f(_px(cfg.start_x))}" cy="{_f(_py(cfg.start_y))}" '
        f'r="4" fill="#1f6fb2" class="start"/>'
    )
    return parts


def _svg_document(body: list[str]) -> str:
    w = SIZE + 2 * MARGIN
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" '
            f'viewBox="0 0 {w} {w}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def plot_trajectories(trajectories, cfg: EnvConfig, path, title: str = "") -> None:
    """One polyline per trajectory, colored by outcome, over the world."""
    if not trajectories:
        raise ValueError("no trajectories to plot")
    body = _env_elements(cfg)
    counts: dict[str, int] = {}
    for traj in trajectories:
        counts[traj.outcome] = counts.get(traj.outcome, 0) + 1
        pts = " ".join(f"{_f(_px(x))},{_f(_py(y))}" for x, y in traj.path)
        color = OUTCOME_COLORS.get(traj.outcome, "#888")
        body.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1" opacity="0.55" class="trajectory {traj.outcome}"/>'
        )
    legend = "  ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
    if title:
        legend = f"{title}  |  {legend}"
    body.append(
        f'<text x="{MARGIN}" y="{MARGIN - 6}" font-size="13" '
        f'font-family="sans-serif" class="legend">{legend}</text>'
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(_svg_document(body))


def _heat_color(v: float) -> str:
    """0 -> blue, 0.5 -> light gray, 1 -> red."""
    v = min(max(v, 0.0), 1.0)
    if v < 0.5:
        t = v / 0.5
        r, g, b = 60 + t * (225 - 60), 90 + t * (225 - 90), 200 + t * (225 - 200)
    else:
        t = (v - 0.5) / 0.5
        r, g, b = 225 - t * (225 - 205), 225 - t * (225 - 60), 225 - t * (225 - 50)
    return f"rgb({int(r)},{int(g)},{int(b)})"


def grid_centers(grid_n: int) -> np.ndarray:
    """(grid_n*grid_n, 2) cell centers over the unit square, row-major from
    the bottom-left."""
    step = 1.0 / grid_n
    axis = step / 2.0 + step * np.arange(grid_n)
    xs, ys = np.meshgrid(axis, axis)
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def probe_chunks(cfg: EnvConfig, state: np.ndarray, centers: np.ndarray,
                 chunk_len: int) -> np.ndarray:
    """Constant-velocity straight-line chunks from ``state`` toward each
    center, at the speed cap."""
    d = centers - state[None, :]
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    v = cfg.speed_cap * d / np.maximum(norms, 1e-12)
    return np.repeat(v[:, None, :], chunk_len, axis=1)


def landscape_scores(verifier, cfg: EnvConfig, state, grid_n: int) -> np.ndarray:
    """Verifier scores of straight probe chunks toward each grid cell, at
    episode step 0; shape (grid_n, grid_n), row index = y cell (bottom-up)."""
    state = np.asarray(state, dtype=np.float64)
    centers = grid_centers(grid_n)
    chunks = probe_chunks(cfg, state, centers, verifier.chunk_len)
    states = np.broadcast_to(state, (len(centers), state.shape[0]))
    scores = verifier.score(states, chunks, np.zeros(len(centers), dtype=int))
    return scores.reshape(grid_n, grid_n)


def door_corridor_mask(cfg: EnvConfig, door: Door, state, grid_n: int) -> np.ndarray:
    """Cells beyond the wall whose straight line from ``state`` crosses the
    wall inside the door opening; shape (grid_n, grid_n)."""
    state = np.asarray(state, dtype=np.float64)
    centers = grid_centers(grid_n)
    dx = centers[:, 0] - state[0]
    beyond = centers[:, 0] > cfg.wall_x
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (cfg.wall_x - state[0]) / dx
        y_cross = state[1] + frac * (centers[:, 1] - state[1])
    inside = (y_cross > door.lo) & (y_cross < door.hi)
    return (beyond & inside).reshape(grid_n, grid_n)


def plot_verifier_landscape(verifier, cfg: EnvConfig, state, grid_n: int,
                            path, title: str = "") -> np.ndarray:
    """SVG heatmap of landscape_scores with door overlays; the numeric grid
    is also written next to the SVG as a tab-separated .tsv file."""
    if grid_n < 2:
        raise ValueError("grid resolution must be at least 2x2")
    scores = landscape_scores(verifier, cfg, state, grid_n)
    lo, hi = float(scores.min()), float(scores.max())
    span = hi - lo if hi > lo else 1.0

    body = []
    step = 1.0 / grid_n
    for iy in range(grid_n):
        for ix in range(grid_n):
            v = (scores[iy, ix] - lo) / span
            body.append(
                f'<rect x="{_f(_px(ix * step))}" y="{_f(_py((iy + 1) * step))}" '
                f'width="{_f(SIZE * step)}" height="{_f(SIZE * step)}" '
                f'fill="{_heat_color(v)}" class="cell"/>'
            )
    body.extend(_env_elements(cfg, background=False))
    legend = f"score range [{lo:.4f}, {hi:.4f}]"
    if title:
        legend = f"{title}  |  {legend}"
    body.append(
        f'<text x="{MARGIN}" y="{MARGIN - 6}" font-size="13" '
        f'font-family="sans-serif" class="legend">{legend}</text>'
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(_svg_document(body))

    tsv_path = os.path.splitext(str(path))[0] + ".tsv"
    np.savetxt(tsv_path, scores, delimiter="\t", fmt="%.17g")
    return scores
