"""Verifier networks scoring (state, action chunk, episode step) transitions.

Two kinds share one architecture: separate two-layer ReLU encoders for
state and action, a sinusoidal embedding of the episode chunk index, and a
trunk of two linear+layernorm+ReLU blocks. The classifier head applies 0.5
dropout then a linear layer, with the pre-dropout activation serving as
the contrastive embedding; the time-to-success head is a plain linear
readout trained by MSE against discounted targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .nn import Dropout, LayerNorm, Linear, sinusoidal_embedding
from .optim import Adam
from .policy import Normalizer
from .rollouts import (
    RolloutDataset,
    TransitionPool,
    contrastive_epoch_pairs,
    split_by_trajectory,
    transition_pool,
)
from .tensor import Tensor, enable_grad, no_grad, sigmoid_np
from .trajectory import Trajectory

log = logging.getLogger(__name__)

KIND_CLASSIFIER = "classifier"
KIND_TIME_TO_SUCCESS = "q"
KINDS = (KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS)


@dataclass(frozen=True)
class ClassifierLossConfig:
    lambda_aux: float = 0.1
    margin: float = 1.0

    def __post_init__(self):
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


@dataclass(frozen=True)
class QTargetConfig:
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")


def compute_q_target(traj: Trajectory, t: int, gamma: float = 0.99) -> float:
    """Discounted time-to-go: gamma^(T-t) for successes, 0 for failures."""
    if not 0 <= t < len(traj.transitions):
        raise ValueError(f"transition index {t} out of range for a trajectory "
                         f"of length {len(traj.transitions)}")
    if traj.success != 1:
        return 0.0
    return gamma ** (traj.success_step - t)


def contrastive_aux_loss(z_pos, z_neg, margin: float = 1.0) -> Tensor:
    """Mean of max(0, margin - ||z+ - z-||)^2 over the pair batch."""
    return T.contrastive_hinge(z_pos, z_neg, margin)


def classifier_loss(logits, labels, z_pos, z_neg,
                    cfg: ClassifierLossConfig,
                    pos_weight: float | None = None) -> Tensor:
    """Binary cross-entropy plus the weighted contrastive hinge."""
    bce = T.bce_with_logits(logits, labels, pos_weight=pos_weight)
    if cfg.lambda_aux == 0.0:
        return bce
    return bce + cfg.lambda_aux * contrastive_aux_loss(z_pos, z_neg, cfg.margin)


class VerifierNet:
    def __init__(self, obs_dim: int, action_dim: int, chunk_len: int,
                 kind: str, rng: np.random.Generator,
                 obs_norm: Normalizer, act_norm: Normalizer,
                 enc_dim: int = 64, trunk_dims: tuple[int, int] = (128, 64),
                 time_emb_dim: int = 64, dropout: float = 0.5,
                 source_policy_id: str | None = None,
                 loss_config: dict | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown verifier kind {kind!r}")
        self.kind = kind
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.chunk_len = chunk_len
        self.enc_dim = enc_dim
        self.trunk_dims = tuple(trunk_dims)
        self.time_emb_dim = time_emb_dim
        self.obs_norm = obs_norm
        self.act_norm = act_norm
        self.source_policy_id = source_policy_id
        self.loss_config = loss_config or {}

        flat = chunk_len * action_dim
        self.state_enc = [Linear(obs_dim, enc_dim, rng, "state_enc0"),
                          Linear(enc_dim, enc_dim, rng, "state_enc1")]
        self.action_enc = [Linear(flat, enc_dim, rng, "action_enc0"),
                           Linear(enc_dim, enc_dim, rng, "action_enc1")]
        d1, d2 = self.trunk_dims
        self.trunk_lin = [Linear(2 * enc_dim + time_emb_dim, d1, rng, "trunk0"),
                          Linear(d1, d2, rng, "trunk1")]
        self.trunk_ln = [LayerNorm(d1, "trunk_ln0"), LayerNorm(d2, "trunk_ln1")]
        self.dropout = Dropout(dropout if kind == KIND_CLASSIFIER else 0.0)
        self.head = Linear(d2, 1, rng, "head")

    def named_parameters(self):
        params = []
        for layer in (*self.state_enc, *self.action_enc):
            params.extend(layer.named_parameters())
        for lin, ln in zip(self.trunk_lin, self.trunk_ln):
            params.extend(lin.named_parameters())
            params.extend(ln.named_parameters())
        params.extend(self.head.named_parameters())
        return params

    def forward(self, states: np.ndarray, chunks_flat, ts,
                train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Returns (scalar output (B,), embedding z (B, trunk_dims[-1])).

        ``chunks_flat`` may be a Tensor to request action-input gradients.
        Inputs are raw env units; normalization happens inside.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        a = chunks_flat if isinstance(chunks_flat, Tensor) else Tensor(chunks_flat)
        s = Tensor(self.obs_norm.encode(states))
        a_n = self.act_norm.encode_t(a)

        h_s = T.relu(self.state_enc[1](T.relu(self.state_enc[0](s))))
        h_a = T.relu(self.action_enc[1](T.relu(self.action_enc[0](a_n))))
        emb = sinusoidal_embedding(np.asarray(ts, dtype=np.float64), self.time_emb_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (states.shape[0], self.time_emb_dim))
        h = T.concat([h_s, h_a, Tensor(emb)], axis=1)
        for lin, ln in zip(self.trunk_lin, self.trunk_ln):
            h = T.relu(ln(lin(h)))
        z = h
        out = self.head(self.dropout(z, rng, train))
        return T.reshape(out, (states.shape[0],)), z

    # -- scoring ----------------------------------------------------------

    def score(self, states, chunks, ts) -> np.ndarray:
        """Eval-mode scores: success probability for the classifier kind,
        raw regressed value for the time-to-success kind."""
        chunks = np.asarray(chunks, dtype=np.float64)
        flat = chunks.reshape(-1, self.chunk_len * self.action_dim)
        with no_grad():
            out, _ = self.forward(states, flat, ts, train=False)
        return sigmoid_np(out.data) if self.kind == KIND_CLASSIFIER else out.data

    def score_gradient(self, states, chunks, ts) -> np.ndarray:
        """Gradient of log-probability (classifier) or raw value (q) with
        respect to the raw action chunk; shape matches ``chunks``."""
        chunks = np.asarray(chunks, dtype=np.float64)
        orig_shape = chunks.shape
        flat = chunks.reshape(-1, self.chunk_len * self.action_dim)
        a = Tensor(flat, requires_grad=True, name="action_input")
        with enable_grad():
            out, _ = self.forward(states, a, ts, train=False)
            objective = T.sum_all(T.log_sigmoid(out)) \
                if self.kind == KIND_CLASSIFIER else T.sum_all(out)
            objective.backward()
        grad = a.grad
        if grad is None or not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite verifier action gradient")
        return grad.reshape(orig_shape)

    # -- persistence --------------------------------------------------------

    def spec_dict(self) -> dict:
        return {
            "kind": "verifier",
            "verifier_kind": self.kind,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "chunk_len": self.chunk_len,
            "enc_dim": self.enc_dim,
            "trunk_dims": list(self.trunk_dims),
            "time_emb_dim": self.time_emb_dim,
            "dropout": self.dropout.p,
            "obs_norm": self.obs_norm.to_dict(),
            "act_norm": self.act_norm.to_dict(),
            "source_policy_id": self.source_policy_id,
            "loss_config": self.loss_config,
        }

    @property
    def verifier_id(self) -> str:
        return checkpoint_id(self.spec_dict(),
                             [(n, p.data) for n, p in self.named_parameters()])

    def save(self, path) -> None:
        save_checkpoint(path, self.spec_dict(),
                        [(n, p.data) for n, p in self.named_parameters()])

    @classmethod
    def load(cls, path) -> "VerifierNet":
        spec, arrays = load_checkpoint(path, expect_spec={"kind": "verifier"})
        net = cls(obs_dim=spec["obs_dim"], action_dim=spec["action_dim"],
                  chunk_len=spec["chunk_len"], kind=spec["verifier_kind"],
                  rng=np.random.default_rng(0),
                  obs_norm=Normalizer.from_dict(spec["obs_norm"]),
                  act_norm=Normalizer.from_dict(spec["act_norm"]),
                  enc_dim=spec["enc_dim"], trunk_dims=tuple(spec["trunk_dims"]),
                  time_emb_dim=spec["time_emb_dim"], dropout=spec["dropout"],
                  source_policy_id=spec["source_policy_id"],
                  loss_config=spec["loss_config"])
        nn.load_parameters(net.named_parameters(), arrays)
        return net


# -- training --------------------------------------------------------------


@dataclass
class VerifierTrainConfig:
    kind: str = KIND_CLASSIFIER
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    lambda_aux: float = 0.1
    margin: float = 1.0
    gamma: float = 0.99
    pos_weight: float | None = None
    resample_pairs_each_epoch: bool = True
    enc_dim: int = 64
    trunk_dims: tuple[int, int] = (128, 64)
    time_emb_dim: int = 64
    dropout: float = 0.5


def _pool_normalizers(pool: TransitionPool) -> tuple[Normalizer, Normalizer]:
    obs_norm = Normalizer.from_data(pool.states)
    act_norm = Normalizer.from_data(
        pool.chunks.reshape(len(pool), -1))
    return obs_norm, act_norm


def _flat_chunks(pool: TransitionPool) -> np.ndarray:
    return pool.chunks.reshape(len(pool), -1)


def train_verifier(dataset: RolloutDataset, cfg: VerifierTrainConfig,
                   source_policy_id: str | None = None
                   ) -> tuple[VerifierNet, list[float]]:
    """Train one verifier; returns the snapshot with the lowest validation
    loss (earliest epoch on ties) and the per-epoch validation losses."""
    if cfg.kind not in KINDS:
        raise ValueError(f"unknown verifier kind {cfg.kind!r}")
    if dataset.train_ids is None or dataset.val_ids is None:
        split_by_trajectory(dataset, fraction=1.0 - cfg.val_fraction,
                            seed=np.random.SeedSequence((cfg.seed, 17)))
    train_pool = transition_pool(dataset, dataset.train_ids, cfg.gamma)
    val_pool = transition_pool(dataset, dataset.val_ids, cfg.gamma)
    if len(val_pool) == 0:
        raise ValueError("validation split is empty")

    root = np.random.SeedSequence((cfg.seed, 29))
    ss_init, ss_train, ss_pairs, ss_valpairs, ss_drop = root.spawn(5)
    rng = np.random.Generator(np.random.PCG64(ss_train))
    pair_rng = np.random.Generator(np.random.PCG64(ss_pairs))
    drop_rng = np.random.Generator(np.random.PCG64(ss_drop))

    obs_norm, act_norm = _pool_normalizers(train_pool)
    sample_tr = dataset.trajectories[0].transitions[0]
    chunk_len, action_dim = sample_tr.chunk.shape
    loss_cfg = ClassifierLossConfig(cfg.lambda_aux, cfg.margin)
    net = VerifierNet(
        obs_dim=train_pool.states.shape[1], action_dim=action_dim,
        chunk_len=chunk_len, kind=cfg.kind,
        rng=np.random.Generator(np.random.PCG64(ss_init)),
        obs_norm=obs_norm, act_norm=act_norm,
        enc_dim=cfg.enc_dim, trunk_dims=cfg.trunk_dims,
        time_emb_dim=cfg.time_emb_dim, dropout=cfg.dropout,
        source_policy_id=source_policy_id,
        loss_config={"lambda_aux": cfg.lambda_aux, "margin": cfg.margin,
                     "gamma": cfg.gamma},
    )
    params = net.named_parameters()
    opt = Adam(params, lr=cfg.lr)

    is_classifier = cfg.kind == KIND_CLASSIFIER
    if is_classifier:
        if len(train_pool.pos_ids()) == 0 or len(train_pool.neg_ids()) == 0:
            raise ValueError("classifier training needs both labels in the "
                             "training split")
        val_pair_rng = np.random.Generator(np.random.PCG64(ss_valpairs))
        val_pos, val_neg = contrastive_epoch_pairs(val_pool, val_pair_rng)
        fixed_pairs = None

    X_tr, X_val = _flat_chunks(train_pool), _flat_chunks(val_pool)

    def pair_loss(pool: TransitionPool, X: np.ndarray, pos_idx, neg_idx,
                  train: bool = False) -> Tensor:
        pos_out, z_pos = net.forward(pool.states[pos_idx], X[pos_idx],
                                     pool.ts[pos_idx], train=train, rng=drop_rng)
        neg_out, z_neg = net.forward(pool.states[neg_idx], X[neg_idx],
                                     pool.ts[neg_idx], train=train, rng=drop_rng)
        logits = T.concat([pos_out, neg_out], axis=0)
        labels = np.concatenate([np.ones(len(pos_idx)), np.zeros(len(neg_idx))])
        return classifier_loss(logits, labels, z_pos, z_neg, loss_cfg,
                               cfg.pos_weight)

    def val_loss() -> float:
        with no_grad():
            if is_classifier:
                loss = pair_loss(val_pool, X_val, val_pos, val_neg)
            else:
                out, _ = net.forward(val_pool.states, X_val, val_pool.ts)
                loss = nn.mse_loss(out, val_pool.q_targets)
        return float(loss.data)

    best = (np.inf, None)
    val_losses: list[float] = []
    for epoch in range(cfg.epochs):
        if is_classifier:
            if cfg.resample_pairs_each_epoch or fixed_pairs is None:
                fixed_pairs = contrastive_epoch_pairs(train_pool, pair_rng)
            pos_idx, neg_idx = fixed_pairs
            for lo in range(0, len(pos_idx), cfg.batch_size):
                opt.zero_grad()
                loss = pair_loss(train_pool, X_tr,
                                 pos_idx[lo: lo + cfg.batch_size],
                                 neg_idx[lo: lo + cfg.batch_size], train=True)
                _check_finite(loss, epoch)
                loss.backward()
                opt.step()
        else:
            perm = rng.permutation(len(train_pool))
            for lo in range(0, len(train_pool), cfg.batch_size):
                rows = perm[lo: lo + cfg.batch_size]
                opt.zero_grad()
                out, _ = net.forward(train_pool.states[rows], X_tr[rows],
                                     train_pool.ts[rows], train=True, rng=drop_rng)
                loss = nn.mse_loss(out, train_pool.q_targets[rows])
                _check_finite(loss, epoch)
                loss.backward()
                opt.step()

        vl = val_loss()
        val_losses.append(vl)
        if vl < best[0]:
            best = (vl, nn.copy_parameters(params))
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            log.info("verifier[%s] epoch %d: val loss %.5f", cfg.kind, epoch, vl)

    nn.load_parameters(params, best[1])
    return net, val_losses


def _check_finite(loss: Tensor, epoch: int) -> None:
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite verifier loss at epoch {epoch}")
