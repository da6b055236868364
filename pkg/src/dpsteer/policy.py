"""Action-chunked DDPM behavior-cloning policy.

The noise predictor is an MLP conditioned on the observation and a
sinusoidal embedding of the diffusion step; it denoises a flattened
action chunk. Actions and observations are affinely mapped to [-1, 1]
(per dimension, from the training data) before they touch the network,
and samples are mapped back before execution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn, tensor as T
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .nn import Mlp, MlpSpec, sinusoidal_embedding
from .optim import Adam
from .schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, NoiseSchedule,
                       make_linear_schedule, posterior_mean_from_x0,
                       predict_x0, q_sample)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map onto [-1, 1] and back."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_data(cls, x: np.ndarray, min_span: float = 1e-6) -> "Normalizer":
        x = x.reshape(-1, x.shape[-1])
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        flat = hi - lo < min_span
        lo = np.where(flat, lo - 0.5 * min_span, lo)
        hi = np.where(flat, hi + 0.5 * min_span, hi)
        return cls(lo=lo, hi=hi)

    @property
    def half_span(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) / self.half_span - 1.0

    def decode(self, x: np.ndarray) -> np.ndarray:
        return (x + 1.0) * self.half_span + self.lo

    def encode_t(self, x: Tensor) -> Tensor:
        return T.sub(T.mul(x, 1.0 / self.half_span), self.lo / self.half_span + 1.0)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(lo=np.array(d["lo"], dtype=np.float64),
                   hi=np.array(d["hi"], dtype=np.float64))


class NoisePredictor:
    """eps(noisy chunk, observation, diffusion step) as a flat MLP."""

    def __init__(self, obs_dim: int, action_dim: int, chunk_len: int,
                 hidden: tuple[int, ...], time_emb_dim: int,
                 rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.chunk_len = chunk_len
        self.time_emb_dim = time_emb_dim
        flat = chunk_len * action_dim
        spec = MlpSpec(in_dim=flat + obs_dim + time_emb_dim,
                       hidden=tuple(hidden), out_dim=flat)
        self.mlp = Mlp(spec, rng, name="eps")

    def __call__(self, x_flat: Tensor | np.ndarray, obs: np.ndarray, k) -> Tensor:
        """x_flat: (B, chunk*act) noisy chunks, obs: (B, obs_dim) normalized,
        k: diffusion step (scalar or per-row array, 1-based)."""
        x_flat = x_flat if isinstance(x_flat, Tensor) else Tensor(x_flat)
        B = x_flat.data.shape[0]
        emb = sinusoidal_embedding(k, self.time_emb_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (B, self.time_emb_dim))
        inp = T.concat([x_flat, Tensor(obs), Tensor(emb)], axis=1)
        return self.mlp(inp)

    def named_parameters(self):
        return self.mlp.named_parameters()


@dataclass
class PolicyTrainConfig:
    chunk_len: int = 8
    hidden: tuple[int, ...] = (256, 256)
    time_emb_dim: int = 64
    diffusion_steps: int = 100
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    epochs: int = 56
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    variance_samples: int = 32
    variance_floor: float = 1e-3
    variance_check_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be > 0")
        self.hidden = tuple(self.hidden)


class DiffusionPolicy:
    def __init__(self, predictor: NoisePredictor, sched: NoiseSchedule,
                 obs_norm: Normalizer, act_norm: Normalizer):
        self.predictor = predictor
        self.schedule = sched
        self.obs_norm = obs_norm
        self.act_norm = act_norm

    @property
    def chunk_len(self) -> int:
        return self.predictor.chunk_len

    @property
    def action_dim(self) -> int:
        return self.predictor.action_dim

    @property
    def obs_dim(self) -> int:
        return self.predictor.obs_dim

    @property
    def flat_dim(self) -> int:
        return self.chunk_len * self.action_dim

    # -- sampling -------------------------------------------------------

    def denoise_batch(self, states: np.ndarray, rngs, guidance=None) -> np.ndarray:
        """Run the full reverse process for a batch of independent rows.

        states: (B, obs_dim) raw observations; rngs: one Generator per row,
        consumed in a fixed order (initial draw, then one z per step down
        to step 2). ``guidance`` may rewrite the clean-sample estimate at
        each step: guidance(x0_normalized, k) -> array. Returns raw-unit
        chunks (B, chunk_len, action_dim).
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B = states.shape[0]
        if len(rngs) != B:
            raise ValueError(f"need one RNG per row: {len(rngs)} != {B}")
        obs = self.obs_norm.encode(states)
        sch = self.schedule
        x = np.stack([rng.standard_normal(self.flat_dim) for rng in rngs])
        with no_grad():
            for k in range(sch.K, 0, -1):
                eps_hat = self.predictor(x, obs, k).data
                x0_hat = predict_x0(sch, x, k, eps_hat)
                if guidance is not None:
                    x0_hat = guidance(x0_hat, k)
                    if not np.all(np.isfinite(x0_hat)):
                        raise FloatingPointError(
                            f"non-finite guided clean-sample estimate at "
                            f"diffusion step {k}"
                        )
                mu = posterior_mean_from_x0(sch, x, x0_hat, k)
                if k > 1:
                    z = np.stack([rng.standard_normal(self.flat_dim) for rng in rngs])
                    x = mu + sch.sigmas[k - 1] * z
                else:
                    x = mu
        return self.act_norm.decode(x.reshape(B, self.chunk_len, self.action_dim))

    def sample_chunk(self, state: np.ndarray, rng: np.random.Generator,
                     guidance=None) -> np.ndarray:
        """One action chunk (chunk_len, action_dim) in raw units."""
        return self.denoise_batch(np.asarray(state)[None, :], [rng], guidance)[0]

    def sample_n_chunks(self, state: np.ndarray, n: int, seed) -> np.ndarray:
        """N chunks from decorrelated substreams of ``seed``; (N, len, act)."""
        if n < 1:
            raise ValueError(f"need n >= 1 candidates, got {n}")
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        rngs = [np.random.Generator(np.random.PCG64(c)) for c in root.spawn(n)]
        states = np.broadcast_to(np.asarray(state, dtype=np.float64),
                                 (n, self.obs_dim))
        return self.denoise_batch(states, rngs)

    # -- persistence ----------------------------------------------------

    def spec_dict(self) -> dict:
        return {
            "kind": "diffusion_policy",
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "chunk_len": self.chunk_len,
            "hidden": list(self.predictor.mlp.spec.hidden),
            "time_emb_dim": self.predictor.time_emb_dim,
            "schedule": {"K": self.schedule.K,
                         "beta_min": float(self.schedule.betas[0]),
                         "beta_max": float(self.schedule.betas[-1])},
            "obs_norm": self.obs_norm.to_dict(),
            "act_norm": self.act_norm.to_dict(),
        }

    @property
    def policy_id(self) -> str:
        return checkpoint_id(self.spec_dict(),
                             [(n, p.data) for n, p in self.predictor.named_parameters()])

    def save(self, path) -> None:
        save_checkpoint(path, self.spec_dict(),
                        [(n, p.data) for n, p in self.predictor.named_parameters()])

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        spec, arrays = load_checkpoint(path, expect_spec={"kind": "diffusion_policy"})
        rng = np.random.default_rng(0)  # immediately overwritten
        predictor = NoisePredictor(spec["obs_dim"], spec["action_dim"],
                                   spec["chunk_len"], tuple(spec["hidden"]),
                                   spec["time_emb_dim"], rng)
        nn.load_parameters(predictor.named_parameters(), arrays)
        s = spec["schedule"]
        sch = make_linear_schedule(s["K"], s["beta_min"], s["beta_max"])
        return cls(predictor, sch,
                   Normalizer.from_dict(spec["obs_norm"]),
                   Normalizer.from_dict(spec["act_norm"]))


# -- training ------------------------------------------------------------


def training_windows(demos, chunk_len: int):
    """Stride-1 (state, next chunk_len actions) pairs from demo paths.

    Uses the per-step path and the concatenated chunk actions; windows that
    would run past the episode end are dropped.
    """
    states, chunks = [], []
    for traj in demos:
        flat = np.concatenate([tr.chunk for tr in traj.transitions], axis=0)
        steps = traj.meta.get("steps", len(flat))
        path = traj.path
        for i in range(0, steps - chunk_len + 1):
            states.append(path[i])
            chunks.append(flat[i: i + chunk_len])
    if not states:
        raise ValueError("no training windows: demo set empty or episodes too short")
    return np.asarray(states), np.asarray(chunks)


@dataclass
class TrainReport:
    loss_per_epoch: list[float] = field(default_factory=list)
    chunk_std_per_epoch: list[float | None] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False


def _sample_std(policy: DiffusionPolicy, probe_state: np.ndarray,
                count: int, ss: np.random.SeedSequence) -> float:
    rngs = [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(count)]
    states = np.broadcast_to(probe_state, (count, policy.obs_dim))
    chunks = policy.denoise_batch(states, rngs)
    return float(chunks.reshape(count, -1).std(axis=0).mean())


def train_policy_on_windows(states: np.ndarray, chunks: np.ndarray,
                            cfg: PolicyTrainConfig,
                            probe_state: np.ndarray | None = None
                            ) -> tuple[DiffusionPolicy, TrainReport]:
    if len(states) != len(chunks):
        raise ValueError("states/chunks length mismatch")
    n, chunk_len, action_dim = chunks.shape
    if chunk_len != cfg.chunk_len:
        raise ValueError(f"chunk length {chunk_len} != config {cfg.chunk_len}")
    obs_dim = states.shape[1]

    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_train, ss_monitor = root.spawn(3)
    rng = np.random.Generator(np.random.PCG64(ss_train))

    predictor = NoisePredictor(obs_dim, action_dim, chunk_len, cfg.hidden,
                               cfg.time_emb_dim,
                               np.random.Generator(np.random.PCG64(ss_init)))
    sch = make_linear_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
    obs_norm = Normalizer.from_data(states)
    act_norm = Normalizer.from_data(chunks.reshape(-1, action_dim))
    policy = DiffusionPolicy(predictor, sch, obs_norm, act_norm)

    X = obs_norm.encode(states)
    A = act_norm.encode(chunks).reshape(n, -1)
    params = predictor.named_parameters()
    opt = Adam(params, lr=cfg.lr)
    if probe_state is None:
        probe_state = states[0]

    report = TrainReport()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo: lo + cfg.batch_size]
            t = rng.integers(1, sch.K + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), A.shape[1]))
            x_t = q_sample(sch, A[idx], t, eps)
            opt.zero_grad()
            pred = predictor(x_t, X[idx], t)
            loss = nn.mse_loss(pred, eps)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss_val
            batches += 1
        report.loss_per_epoch.append(total / batches)
        report.epochs_run = epoch + 1
        check = (epoch + 1) % cfg.variance_check_every == 0 \
            or epoch == cfg.epochs - 1
        if not check:
            report.chunk_std_per_epoch.append(None)
            continue
        std = _sample_std(policy, probe_state, cfg.variance_samples,
                          ss_monitor.spawn(1)[0])
        report.chunk_std_per_epoch.append(std)
        log.info("policy epoch %d: loss %.5f, sample std %.5f",
                 epoch, report.loss_per_epoch[-1], std)
        if std < cfg.variance_floor:
            report.stopped_early = True
            log.info("variance %.2e under floor %.2e, stopping early",
                     std, cfg.variance_floor)
            break
    return policy, report


def train_policy(demos, cfg: PolicyTrainConfig) -> tuple[DiffusionPolicy, TrainReport]:
    """Behavior-clone the demo set; see train_policy_on_windows."""
    if not demos:
        raise ValueError("empty demo set")
    states, chunks = training_windows(demos, cfg.chunk_len)
    return train_policy_on_windows(states, chunks, cfg)
