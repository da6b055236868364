"""Labeled evaluation rollouts: collection, persistence, splits, pairing.

Episodes are run in lockstep blocks so the policy's reverse-diffusion
matmuls batch across episodes; each episode still consumes its own RNG
substream, derived from (root seed, episode index), so results do not
depend on the block layout.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .env import EnvConfig, NavEnv
from .trajectory import OUTCOME_SUCCESS, Trajectory, Transition

log = logging.getLogger(__name__)


class ChunkSampler(Protocol):
    """Batched chunk source: one action chunk per episode row."""

    def sample(self, states: np.ndarray, ts: np.ndarray,
               seeds: list[np.random.SeedSequence]) -> np.ndarray: ...


@dataclass
class RolloutDataset:
    trajectories: list[Trajectory]
    train_ids: list[int] | None = None
    val_ids: list[int] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def labels(self) -> np.ndarray:
        return np.array([t.success for t in self.trajectories])


def as_seedseq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def episode_seed(root, index: int) -> np.random.SeedSequence:
    root = as_seedseq(root)
    return np.random.SeedSequence(entropy=root.entropy,
                                  spawn_key=root.spawn_key + (index,))


def run_episode_block(env_cfg: EnvConfig, sampler: ChunkSampler,
                      seeds: list[np.random.SeedSequence],
                      meta: dict | None = None) -> list[Trajectory]:
    """Run one lockstep block of episodes to termination."""
    B = len(seeds)
    envs = [NavEnv(env_cfg) for _ in range(B)]
    recs: list[list[Transition]] = [[] for _ in range(B)]
    paths: list[list[np.ndarray]] = [[env.state.position.copy()] for env in envs]
    active = list(range(B))
    t = 0
    while active:
        states = np.stack([envs[i].state.position for i in active])
        ts = np.full(len(active), t)
        chunk_seeds = [seeds[i].spawn(1)[0] for i in active]
        chunks = sampler.sample(states, ts, chunk_seeds)
        still = []
        for row, i in enumerate(active):
            env = envs[i]
            recs[i].append(Transition(state=states[row].copy(),
                                      chunk=chunks[row].copy(), t=t))
            for action in chunks[row]:
                env.step(action)
                paths[i].append(env.state.position.copy())
                if env.state.terminal:
                    break
            if not env.state.terminal:
                still.append(i)
        active = still
        t += 1
    out = []
    for i in range(B):
        outcome = envs[i].state.outcome
        traj = Trajectory(
            transitions=recs[i],
            success=1 if outcome == OUTCOME_SUCCESS else 0,
            success_step=len(recs[i]) - 1 if outcome == OUTCOME_SUCCESS else None,
            outcome=outcome,
            meta=dict(meta or {}),
            path=np.array(paths[i]),
        )
        traj.validate()
        out.append(traj)
    return out


def collect_rollouts(env_cfg: EnvConfig, sampler: ChunkSampler, count: int,
                     seed, block: int = 250,
                     meta: dict | None = None) -> RolloutDataset:
    """Run ``count`` labeled episodes with per-episode RNG substreams."""
    if count < 1:
        raise ValueError(f"episode count must be >= 1, got {count}")
    root = as_seedseq(seed)
    trajectories: list[Trajectory] = []
    for lo in range(0, count, block):
        hi = min(lo + block, count)
        seeds = [episode_seed(root, i) for i in range(lo, hi)]
        block_meta = dict(meta or {})
        trajs = run_episode_block(env_cfg, sampler, seeds, meta=block_meta)
        for i, traj in zip(range(lo, hi), trajs):
            traj.meta["episode"] = i
        trajectories.extend(trajs)
        log.info("collected %d/%d episodes", hi, count)
    ds_meta = dict(meta or {})
    ds_meta["count"] = count
    return RolloutDataset(trajectories=trajectories, meta=ds_meta)


def split_by_trajectory(dataset: RolloutDataset, fraction: float = 0.8,
                        seed=0) -> tuple[list[int], list[int]]:
    """Trajectory-level stratified split; transitions never straddle it."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {fraction}")
    n = len(dataset.trajectories)
    if n < 2:
        raise ValueError("need at least 2 trajectories to split")
    labels = dataset.labels()
    if labels.min() == labels.max():
        warnings.warn("dataset contains a single class; the split cannot be "
                      "stratified", stacklevel=2)
    rng = np.random.Generator(np.random.PCG64(as_seedseq(seed)))
    train_ids: list[int] = []
    val_ids: list[int] = []
    for label in (1, 0):
        ids = np.flatnonzero(labels == label)
        if len(ids) == 0:
            continue
        ids = ids[rng.permutation(len(ids))]
        n_train = int(round(fraction * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1) if len(ids) > 1 else 1
        train_ids.extend(ids[:n_train].tolist())
        val_ids.extend(ids[n_train:].tolist())
    dataset.train_ids = sorted(train_ids)
    dataset.val_ids = sorted(val_ids)
    return dataset.train_ids, dataset.val_ids


# -- transition pools and contrastive pairing ---------------------------


@dataclass
class TransitionPool:
    """Stacked transition arrays for vectorized training."""

    states: np.ndarray      # (N, obs_dim)
    chunks: np.ndarray      # (N, chunk_len, action_dim)
    ts: np.ndarray          # (N,)
    labels: np.ndarray      # (N,) trajectory success label
    traj_ids: np.ndarray    # (N,)
    q_targets: np.ndarray   # (N,) discounted time-to-success targets

    def __len__(self) -> int:
        return len(self.ts)

    def pos_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    def neg_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def transition_pool(dataset: RolloutDataset, ids, gamma: float = 0.99) -> TransitionPool:
    states, chunks, ts, labels, traj_ids, q = [], [], [], [], [], []
    for i in ids:
        traj = dataset.trajectories[i]
        for tr in traj.transitions:
            states.append(tr.state)
            chunks.append(tr.chunk)
            ts.append(tr.t)
            labels.append(traj.success)
            traj_ids.append(i)
            if traj.success == 1:
                q.append(gamma ** (traj.success_step - tr.t))
            else:
                q.append(0.0)
    return TransitionPool(states=np.asarray(states), chunks=np.asarray(chunks),
                          ts=np.asarray(ts), labels=np.asarray(labels),
                          traj_ids=np.asarray(traj_ids), q_targets=np.asarray(q))


def contrastive_epoch_pairs(pool: TransitionPool,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One epoch of contrastive pairs over a pool.

    Every success transition is paired with a uniformly random failure
    transition and vice versa, so each transition anchors exactly one pair
    per epoch. Returns (pos_indices, neg_indices) into the pool, shuffled.
    """
    pos, neg = pool.pos_ids(), pool.neg_ids()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("contrastive pairing needs both success and failure "
                         "transitions")
    pos_part = np.stack([pos, rng.choice(neg, size=len(pos))], axis=1)
    neg_part = np.stack([rng.choice(pos, size=len(neg)), neg], axis=1)
    pairs = np.concatenate([pos_part, neg_part], axis=0)
    pairs = pairs[rng.permutation(len(pairs))]
    return pairs[:, 0], pairs[:, 1]


def sample_contrastive_pairs(dataset: RolloutDataset, batch: int, seed=0,
                             gamma: float = 0.99) -> tuple[TransitionPool, np.ndarray, np.ndarray]:
    """First ``batch`` pairs of a fresh epoch pairing over the whole dataset."""
    pool = transition_pool(dataset, range(len(dataset.trajectories)), gamma)
    rng = np.random.Generator(np.random.PCG64(as_seedseq(seed)))
    pos_idx, neg_idx = contrastive_epoch_pairs(pool, rng)
    return pool, pos_idx[:batch], neg_idx[:batch]


# -- persistence ---------------------------------------------------------


def save_rollouts(path, dataset: RolloutDataset) -> None:
    """One JSON line per trajectory, floats in shortest round-trip form."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"kind": "rollouts", "meta": dataset.meta,
                  "count": len(dataset.trajectories)}
        f.write(json.dumps(header) + "\n")
        for traj in dataset.trajectories:
            rec = {
                "success": traj.success,
                "success_step": traj.success_step,
                "outcome": traj.outcome,
                "meta": traj.meta,
                "transitions": [
                    {"t": tr.t, "state": tr.state.tolist(),
                     "chunk": tr.chunk.tolist()}
                    for tr in traj.transitions
                ],
                "path": traj.path.tolist() if traj.path is not None else None,
            }
            f.write(json.dumps(rec) + "\n")


def load_rollouts(path) -> RolloutDataset:
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("kind") != "rollouts":
            raise ValueError(f"{path} is not a rollout dataset")
        trajectories = []
        for line in f:
            rec = json.loads(line)
            trajectories.append(Trajectory(
                transitions=[
                    Transition(state=np.array(tr["state"]),
                               chunk=np.array(tr["chunk"]), t=tr["t"])
                    for tr in rec["transitions"]
                ],
                success=rec["success"],
                success_step=rec["success_step"],
                outcome=rec["outcome"],
                meta=rec["meta"],
                path=np.array(rec["path"]) if rec["path"] is not None else None,
            ))
    return RolloutDataset(trajectories=trajectories, meta=header["meta"])
