"""Inference-time steering of a frozen policy by a trained verifier.

Two strategies: Best-of-N (sample N candidate chunks, execute the verifier
argmax, ties to the lowest index) and classifier guidance (perturb the
predicted clean sample by the verifier's action gradient at every reverse
diffusion step). Guidance never draws from the sampling RNG, so a zero
strength run is bit-identical to unguided sampling under a shared stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvConfig
from .policy import DiffusionPolicy
from .rollouts import as_seedseq, episode_seed, run_episode_block
from .trajectory import Trajectory
from .verifiers import VerifierNet

MODE_NONE = "none"
MODE_BON = "bon"
MODE_CG = "cg"
MODES = (MODE_NONE, MODE_BON, MODE_CG)


@dataclass(frozen=True)
class SteeringConfig:
    mode: str = MODE_NONE
    n: int = 30            # Best-of-N candidate count
    cg_lambda: float = 0.1  # guidance strength
    grad_cap: float | None = None  # optional max-norm for guidance gradients

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown steering mode {self.mode!r}")
        if self.n < 1:
            raise ValueError("Best-of-N needs n >= 1")
        if self.cg_lambda < 0:
            raise ValueError("guidance strength must be >= 0")

    def describe(self) -> dict:
        d = {"mode": self.mode}
        if self.mode == MODE_BON:
            d["n"] = self.n
        if self.mode == MODE_CG:
            d["lambda"] = self.cg_lambda
            d["grad_cap"] = self.grad_cap
        return d


class PolicyChunkSampler:
    """Unsteered sampler: one reverse-diffusion run per episode row."""

    def __init__(self, policy: DiffusionPolicy):
        self.policy = policy

    def sample(self, states, ts, seeds):
        rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
        return self.policy.denoise_batch(states, rngs)


class BestOfNChunkSampler:
    """Per row: N candidates from decorrelated substreams, verifier argmax."""

    def __init__(self, policy: DiffusionPolicy, verifier: VerifierNet, n: int):
        if n < 1:
            raise ValueError("Best-of-N needs n >= 1")
        self.policy = policy
        self.verifier = verifier
        self.n = n
        self.last_scores: np.ndarray | None = None  # (B, n) diagnostics

    def sample(self, states, ts, seeds):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B, n = states.shape[0], self.n
        rngs = [np.random.Generator(np.random.PCG64(c))
                for s in seeds for c in s.spawn(n)]
        rows = np.repeat(states, n, axis=0)
        chunks = self.policy.denoise_batch(rows, rngs)
        ts_rep = np.repeat(np.asarray(ts), n)
        scores = self.verifier.score(rows, chunks, ts_rep).reshape(B, n)
        self.last_scores = scores
        pick = scores.argmax(axis=1)
        return chunks.reshape(B, n, *chunks.shape[1:])[np.arange(B), pick]


class GuidedChunkSampler:
    """Reverse diffusion with the verifier gradient nudging each clean-sample
    estimate; strength zero skips the perturbation entirely."""

    def __init__(self, policy: DiffusionPolicy, verifier: VerifierNet,
                 strength: float, grad_cap: float | None = None):
        self.policy = policy
        self.verifier = verifier
        self.strength = strength
        self.grad_cap = grad_cap

    def _guidance(self, states, ts):
        policy, verifier = self.policy, self.verifier
        lam, cap = self.strength, self.grad_cap
        # The verifier consumes raw-unit actions; the policy denoises in
        # normalized space, so chain through the decode scale.
        scale = np.tile(policy.act_norm.half_span, policy.chunk_len)

        def guide(x0_norm: np.ndarray, k: int) -> np.ndarray:
            raw = policy.act_norm.decode(
                x0_norm.reshape(-1, policy.chunk_len, policy.action_dim))
            g = verifier.score_gradient(states, raw, ts)
            g = g.reshape(x0_norm.shape) * scale
            if cap is not None:
                norms = np.linalg.norm(g, axis=-1, keepdims=True)
                g = np.where(norms > cap, g * (cap / np.maximum(norms, 1e-300)), g)
            return x0_norm + lam * g

        return guide

    def sample(self, states, ts, seeds):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
        guidance = self._guidance(states, np.asarray(ts)) if self.strength != 0.0 else None
        return self.policy.denoise_batch(states, rngs, guidance=guidance)


def make_sampler(policy: DiffusionPolicy, verifier: VerifierNet | None,
                 config: SteeringConfig):
    if config.mode == MODE_NONE:
        return PolicyChunkSampler(policy)
    if verifier is None:
        raise ValueError(f"steering mode {config.mode!r} needs a verifier")
    if config.mode == MODE_BON:
        return BestOfNChunkSampler(policy, verifier, config.n)
    return GuidedChunkSampler(policy, verifier, config.cg_lambda, config.grad_cap)


def bon_select(policy: DiffusionPolicy, verifier: VerifierNet, state, t: int,
               config: SteeringConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Best-of-N for a single state; returns (chosen chunk, candidate scores)."""
    sampler = BestOfNChunkSampler(policy, verifier, config.n)
    chunk = sampler.sample(np.asarray(state)[None, :], np.array([t]),
                           [as_seedseq(seed)])[0]
    return chunk, sampler.last_scores[0]


def cg_sample(policy: DiffusionPolicy, verifier: VerifierNet, state, t: int,
              strength: float, seed, grad_cap: float | None = None) -> np.ndarray:
    """Guided sampling for a single state at episode chunk index t."""
    sampler = GuidedChunkSampler(policy, verifier, strength, grad_cap)
    return sampler.sample(np.asarray(state)[None, :], np.array([t]),
                          [as_seedseq(seed)])[0]


def steered_rollout(policy: DiffusionPolicy, verifier: VerifierNet | None,
                    env_cfg: EnvConfig, config: SteeringConfig, seed,
                    episode_index: int = 0) -> Trajectory:
    """One full episode under the given steering config."""
    sampler = make_sampler(policy, verifier, config)
    meta = {"steering": config.describe(), "policy_id": policy.policy_id}
    if verifier is not None and config.mode != MODE_NONE:
        meta["verifier_id"] = verifier.verifier_id
    traj = run_episode_block(env_cfg, sampler,
                             [episode_seed(seed, episode_index)], meta=meta)[0]
    traj.meta["episode"] = episode_index
    return traj
