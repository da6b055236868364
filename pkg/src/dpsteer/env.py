"""2D two-door navigation world and its expert demonstrator.

A velocity-controlled point agent starts left of a thin vertical wall and
must reach a goal circle on the right. The wall has two openings: a wide
door that forgives sloppy motion and a narrow one that does not. Motion is
tested as a segment against the solid wall pieces and the workspace
boundary, so a fast step cannot tunnel through geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .trajectory import (
    OUTCOME_COLLISION,
    OUTCOME_RUNNING,
    OUTCOME_SUCCESS,
    OUTCOME_TIMEOUT,
    Trajectory,
    Transition,
)


@dataclass(frozen=True)
class Door:
    center: float
    width: float

    @property
    def lo(self) -> float:
        return self.center - self.width / 2.0

    @property
    def hi(self) -> float:
        return self.center + self.width / 2.0


@dataclass(frozen=True)
class EnvConfig:
    wall_x: float = 0.5
    wall_thickness: float = 0.01
    wide_door: Door = field(default_factory=lambda: Door(0.70, 0.20))
    narrow_door: Door = field(default_factory=lambda: Door(0.30, 0.06))
    goal_x: float = 0.92
    goal_y: float = 0.50
    goal_radius: float = 0.05
    start_x: float = 0.06
    start_y: float = 0.50
    speed_cap: float = 0.04
    max_steps: int = 120

    def __post_init__(self):
        doors = sorted([self.wide_door, self.narrow_door], key=lambda d: d.lo)
        if doors[0].hi >= doors[1].lo:
            raise ValueError("doors overlap")
        for d in doors:
            if d.lo <= 0.0 or d.hi >= 1.0:
                raise ValueError(f"door {d} not inside the workspace")
        if not self.start_x < self.wall_x - self.wall_thickness / 2.0:
            raise ValueError("start must be strictly left of the wall")
        if not self.goal_x > self.wall_x + self.wall_thickness / 2.0:
            raise ValueError("goal must be strictly right of the wall")
        shortest = np.hypot(self.goal_x - self.start_x, self.goal_y - self.start_y)
        if self.max_steps < int(np.ceil(shortest / self.speed_cap)):
            raise ValueError("max_steps below the shortest-path step count")

    @property
    def start(self) -> np.ndarray:
        return np.array([self.start_x, self.start_y])

    @property
    def goal(self) -> np.ndarray:
        return np.array([self.goal_x, self.goal_y])

    def wall_band(self) -> tuple[float, float]:
        half = self.wall_thickness / 2.0
        return self.wall_x - half, self.wall_x + half

    def solid_spans(self) -> list[tuple[float, float]]:
        """Wall y-intervals that remain solid between the doors."""
        doors = sorted([self.wide_door, self.narrow_door], key=lambda d: d.lo)
        spans = [(0.0, doors[0].lo), (doors[0].hi, doors[1].lo), (doors[1].hi, 1.0)]
        return [(lo, hi) for lo, hi in spans if hi > lo]

    def to_dict(self) -> dict:
        return {
            "wall_x": self.wall_x,
            "wall_thickness": self.wall_thickness,
            "wide_door": {"center": self.wide_door.center, "width": self.wide_door.width},
            "narrow_door": {"center": self.narrow_door.center, "width": self.narrow_door.width},
            "goal_x": self.goal_x,
            "goal_y": self.goal_y,
            "goal_radius": self.goal_radius,
            "start_x": self.start_x,
            "start_y": self.start_y,
            "speed_cap": self.speed_cap,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        for key in ("wide_door", "narrow_door"):
            if key in d and isinstance(d[key], dict):
                d[key] = Door(d[key]["center"], d[key]["width"])
        return cls(**d)


@dataclass
class EnvState:
    position: np.ndarray
    steps: int = 0
    outcome: str = OUTCOME_RUNNING

    @property
    def terminal(self) -> bool:
        return self.outcome != OUTCOME_RUNNING


def _segment_aabb_entry(p, d, xlo, xhi, ylo, yhi):
    """Earliest s in [0,1] where p + s*d enters the box, or None."""
    t0, t1 = 0.0, 1.0
    for axis, (lo, hi) in enumerate(((xlo, xhi), (ylo, yhi))):
        if d[axis] == 0.0:
            if p[axis] < lo or p[axis] > hi:
                return None
        else:
            a = (lo - p[axis]) / d[axis]
            b = (hi - p[axis]) / d[axis]
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
            if t0 > t1:
                return None
    return t0


def _segment_circle_entry(p, d, center, radius):
    """Earliest s in [0,1] where p + s*d touches the disc, or None."""
    f = p - center
    a = float(d @ d)
    if a == 0.0:
        return 0.0 if float(f @ f) <= radius * radius else None
    b = 2.0 * float(f @ d)
    c = float(f @ f) - radius * radius
    if c <= 0.0:
        return 0.0
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    s = (-b - np.sqrt(disc)) / (2.0 * a)
    return s if 0.0 <= s <= 1.0 else None


def _segment_box_exit(p, d):
    """Earliest s in [0,1] where p + s*d leaves the unit square, or None."""
    t_exit = np.inf
    for axis in range(2):
        if d[axis] > 0.0:
            t_exit = min(t_exit, (1.0 - p[axis]) / d[axis])
        elif d[axis] < 0.0:
            t_exit = min(t_exit, (0.0 - p[axis]) / d[axis])
    return t_exit if 0.0 <= t_exit <= 1.0 else None


class NavEnv:
    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = EnvState(position=config.start.copy())

    def reset(self) -> EnvState:
        self.state = EnvState(position=self.config.start.copy())
        return self.state

    def step(self, velocity) -> EnvState:
        """Advance one step; the velocity is clipped to the speed cap."""
        st = self.state
        if st.terminal:
            raise RuntimeError(f"step() on a terminal state (outcome={st.outcome})")
        cfg = self.config
        v = np.asarray(velocity, dtype=np.float64).copy()
        speed = float(np.hypot(v[0], v[1]))
        if speed > cfg.speed_cap:
            v *= cfg.speed_cap / speed

        p = st.position
        xlo, xhi = cfg.wall_band()
        s_collide = _segment_box_exit(p, v)
        for ylo, yhi in cfg.solid_spans():
            hit = _segment_aabb_entry(p, v, xlo, xhi, ylo, yhi)
            if hit is not None and (s_collide is None or hit < s_collide):
                s_collide = hit
        s_goal = _segment_circle_entry(p, v, cfg.goal, cfg.goal_radius)

        st.steps += 1
        if s_goal is not None and (s_collide is None or s_goal <= s_collide):
            st.position = p + s_goal * v
            st.outcome = OUTCOME_SUCCESS
        elif s_collide is not None:
            st.position = p + s_collide * v
            st.outcome = OUTCOME_COLLISION
        else:
            st.position = p + v
            if st.steps >= cfg.max_steps:
                st.outcome = OUTCOME_TIMEOUT
        return st


def segment_hits_wall(cfg: EnvConfig, p, q) -> bool:
    """Does the segment p->q touch a solid piece of the wall?"""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(q, dtype=np.float64) - p
    xlo, xhi = cfg.wall_band()
    return any(
        _segment_aabb_entry(p, d, xlo, xhi, ylo, yhi) is not None
        for ylo, yhi in cfg.solid_spans()
    )


def replay_actions(cfg: EnvConfig, actions) -> tuple[str, np.ndarray]:
    """Run a recorded action sequence; returns (outcome, visited positions)."""
    env = NavEnv(cfg)
    positions = [env.state.position.copy()]
    for a in actions:
        env.step(a)
        positions.append(env.state.position.copy())
        if env.state.terminal:
            break
    return env.state.outcome, np.array(positions)


# -- expert demonstrations ---------------------------------------------


def _expert_control_points(cfg: EnvConfig, door: Door,
                           rng: np.random.Generator, jitter: float) -> np.ndarray:
    pts = np.array([
        [cfg.start_x, cfg.start_y],
        [cfg.start_x + 0.45 * (cfg.wall_x - cfg.start_x),
         cfg.start_y + 0.55 * (door.center - cfg.start_y)],
        [cfg.wall_x, door.center],
        [cfg.wall_x + 0.55 * (cfg.goal_x - cfg.wall_x),
         cfg.goal_y + 0.45 * (door.center - cfg.goal_y)],
        [cfg.goal_x, cfg.goal_y],
    ])
    pts[1:4] += rng.normal(0.0, jitter, size=(3, 2))
    return pts


def _spline_path(points: np.ndarray, samples: int = 400) -> np.ndarray:
    chord = np.concatenate([[0.0], np.cumsum(
        np.hypot(*np.diff(points, axis=0).T))])
    spline = CubicSpline(chord, points, axis=0)
    return spline(np.linspace(0.0, chord[-1], samples))


def _walk_spline(cfg: EnvConfig, dense: np.ndarray):
    """Drive the env along a dense polyline; returns (outcome, actions, path)."""
    env = NavEnv(cfg)
    actions = []
    path = [env.state.position.copy()]
    idx = 0
    stride = 0.92 * cfg.speed_cap
    while not env.state.terminal:
        pos = env.state.position
        # Advance the lookahead target along the curve, then head for it.
        while idx < len(dense) - 1 and np.hypot(*(dense[idx] - pos)) < stride:
            idx += 1
        target = dense[idx]
        v = target - pos
        speed = float(np.hypot(v[0], v[1]))
        if speed > cfg.speed_cap:
            v *= cfg.speed_cap / speed
        env.step(v)
        actions.append(v)
        path.append(env.state.position.copy())
    return env.state.outcome, actions, np.array(path)


def chunk_actions(actions, chunk_len: int) -> np.ndarray:
    """Group per-step actions into fixed-size chunks, zero-padding the tail."""
    actions = np.asarray(actions, dtype=np.float64)
    n_chunks = int(np.ceil(len(actions) / chunk_len))
    padded = np.zeros((n_chunks * chunk_len, actions.shape[1]))
    padded[: len(actions)] = actions
    return padded.reshape(n_chunks, chunk_len, actions.shape[1])


def generate_expert_demos(cfg: EnvConfig, count: int, seed,
                          chunk_len: int = 8, jitter: float = 0.01,
                          max_tries: int = 25) -> list[Trajectory]:
    """Successful S-curve demos through the two doors, roughly 50/50.

    Every demo is produced by driving the env itself, so success is
    guaranteed by construction; a jittered spline that collides is
    re-drawn, and running out of retries is an error.
    """
    if count < 1:
        raise ValueError(f"demo count must be >= 1, got {count}")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    demos = []
    for i, child in enumerate(root.spawn(count)):
        rng = np.random.Generator(np.random.PCG64(child))
        door_name = "wide" if rng.random() < 0.5 else "narrow"
        door = cfg.wide_door if door_name == "wide" else cfg.narrow_door
        for attempt in range(max_tries):
            pts = _expert_control_points(cfg, door, rng, jitter)
            outcome, actions, path = _walk_spline(cfg, _spline_path(pts))
            if outcome == OUTCOME_SUCCESS:
                break
        else:
            raise RuntimeError(
                f"demo {i}: no successful trajectory in {max_tries} tries"
            )
        chunks = chunk_actions(actions, chunk_len)
        transitions = [
            Transition(state=path[min(t * chunk_len, len(path) - 1)].copy(),
                       chunk=chunks[t], t=t)
            for t in range(len(chunks))
        ]
        demos.append(Trajectory(
            transitions=transitions,
            success=1,
            success_step=len(chunks) - 1,
            outcome=OUTCOME_SUCCESS,
            meta={"source": "expert", "door": door_name, "episode": i,
                  "steps": len(actions)},
            path=path,
        ))
    return demos
