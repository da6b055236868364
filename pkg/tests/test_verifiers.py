import math

import numpy as np
import pytest

from dpsteer.gradcheck import check_gradients
from dpsteer.policy import Normalizer
from dpsteer.rollouts import RolloutDataset, split_by_trajectory
from dpsteer.tensor import Tensor, sigmoid_np
from dpsteer.trajectory import OUTCOME_COLLISION, OUTCOME_SUCCESS, Trajectory, Transition
from dpsteer.verifiers import (ClassifierLossConfig, KIND_CLASSIFIER,
                               KIND_TIME_TO_SUCCESS, QTargetConfig,
                               VerifierNet, VerifierTrainConfig,
                               classifier_loss, compute_q_target,
                               contrastive_aux_loss, train_verifier)


def make_trajectory(states, label, chunk_rng, chunk_len=8, action_dim=2):
    transitions = [
        Transition(state=np.asarray(s, dtype=float),
                   chunk=chunk_rng.normal(size=(chunk_len, action_dim)) * 0.02,
                   t=i)
        for i, s in enumerate(states)
    ]
    return Trajectory(transitions=transitions, success=label,
                      success_step=len(states) - 1 if label else None,
                      outcome=OUTCOME_SUCCESS if label else OUTCOME_COLLISION,
                      meta={}, path=np.zeros((1, 2)))


# -- q targets ---------------------------------------------------------------

def test_q_target_values():
    rng = np.random.default_rng(0)
    traj = make_trajectory([[0, 0]] * 51, 1, rng)
    assert compute_q_target(traj, 50) == 1.0
    assert compute_q_target(traj, 40) == pytest.approx(0.99 ** 10, abs=1e-15)
    fail = make_trajectory([[0, 0]] * 51, 0, rng)
    for t in (0, 25, 50):
        assert compute_q_target(fail, t) == 0.0
    with pytest.raises(ValueError):
        compute_q_target(traj, 51)


def test_q_target_config_validation():
    with pytest.raises(ValueError):
        QTargetConfig(gamma=1.0)
    assert QTargetConfig().gamma == 0.99


def test_q_targets_monotone_in_t():
    rng = np.random.default_rng(1)
    traj = make_trajectory([[0, 0]] * 20, 1, rng)
    vals = [compute_q_target(traj, t) for t in range(20)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


# -- loss closed forms ---------------------------------------------------------

def test_contrastive_aux_loss_closed_forms():
    z = Tensor(np.zeros((3, 8)))
    assert contrastive_aux_loss(z, Tensor(np.zeros((3, 8))), 1.0).item() == 1.0
    d = np.zeros((1, 8)); d[0, 1] = 0.5
    assert contrastive_aux_loss(Tensor(d), Tensor(np.zeros((1, 8))), 1.0).item() == 0.25
    far = np.zeros((1, 8)); far[0, 0] = 2.0
    assert contrastive_aux_loss(Tensor(far), Tensor(np.zeros((1, 8))), 1.0).item() == 0.0


def test_classifier_loss_composition():
    logits = Tensor(np.zeros(2))
    labels = np.array([1.0, 0.0])
    zp = Tensor(np.zeros((1, 4)))
    zn = Tensor(np.zeros((1, 4)))
    cfg = ClassifierLossConfig(lambda_aux=0.1, margin=1.0)
    # BCE at logit 0 is ln 2; identical embeddings add 0.1 * 1.0
    got = classifier_loss(logits, labels, zp, zn, cfg).item()
    assert got == pytest.approx(math.log(2.0) + 0.1, abs=1e-12)
    cfg0 = ClassifierLossConfig(lambda_aux=0.0, margin=1.0)
    assert classifier_loss(logits, labels, zp, zn, cfg0).item() == pytest.approx(
        math.log(2.0), abs=1e-15)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        ClassifierLossConfig(lambda_aux=-0.1)
    with pytest.raises(ValueError):
        ClassifierLossConfig(margin=0.0)


# -- network -------------------------------------------------------------------

def unit_norms(obs_dim=2, flat=16):
    return (Normalizer(lo=np.full(obs_dim, -1.0), hi=np.full(obs_dim, 1.0)),
            Normalizer(lo=np.full(flat, -1.0), hi=np.full(flat, 1.0)))


def small_net(kind, seed=0, chunk_len=8):
    obs_norm, act_norm = unit_norms()
    return VerifierNet(obs_dim=2, action_dim=2, chunk_len=chunk_len, kind=kind,
                       rng=np.random.default_rng(seed), obs_norm=obs_norm,
                       act_norm=act_norm, enc_dim=8, trunk_dims=(12, 6),
                       time_emb_dim=8)


def test_score_shapes_and_range(rng):
    net = small_net(KIND_CLASSIFIER)
    states = rng.random((5, 2))
    chunks = rng.normal(size=(5, 8, 2)) * 0.02
    s = net.score(states, chunks, np.arange(5))
    assert s.shape == (5,)
    assert np.all((s > 0) & (s < 1))
    q = small_net(KIND_TIME_TO_SUCCESS).score(states, chunks, np.arange(5))
    assert q.shape == (5,)


def test_score_deterministic_eval(rng):
    net = small_net(KIND_CLASSIFIER)
    states = rng.random((3, 2))
    chunks = rng.normal(size=(3, 8, 2)) * 0.02
    assert np.array_equal(net.score(states, chunks, np.zeros(3, int)),
                          net.score(states, chunks, np.zeros(3, int)))


def test_score_gradient_matches_finite_differences(rng):
    for kind in (KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS):
        net = small_net(kind)
        state = rng.random(2)
        chunk = rng.normal(size=(8, 2)) * 0.02
        grad = net.score_gradient(state[None, :], chunk[None], np.array([3]))[0]
        assert grad.shape == (8, 2)
        h = 1e-5
        for idx in [(0, 0), (3, 1), (7, 0)]:
            cp, cm = chunk.copy(), chunk.copy()
            cp[idx] += h
            cm[idx] -= h
            if kind == KIND_CLASSIFIER:
                def f(c):
                    return math.log(float(net.score(state[None, :], c[None],
                                                    np.array([3]))[0]))
            else:
                def f(c):
                    return float(net.score(state[None, :], c[None],
                                           np.array([3]))[0])
            fd = (f(cp) - f(cm)) / (2 * h)
            rel = abs(grad[idx] - fd) / (abs(grad[idx]) + abs(fd) + 1e-12)
            assert rel < 1e-4, (kind, idx, grad[idx], fd)


def test_classifier_gradient_scaling_invariance(rng):
    """Scaling the logit by c > 0 scales the logit gradient by c and leaves
    any argmax over candidates unchanged."""
    net = small_net(KIND_CLASSIFIER, seed=3)
    state = rng.random((1, 2))
    chunks = rng.normal(size=(6, 8, 2)) * 0.02
    states = np.repeat(state, 6, axis=0)
    ts = np.zeros(6, int)
    probs = net.score(states, chunks, ts)
    logits = np.log(probs / (1 - probs))
    assert np.argmax(probs) == np.argmax(logits)
    assert np.argmax(probs) == np.argmax(3.7 * logits)


def test_constant_verifier_has_zero_gradient(rng):
    net = small_net(KIND_CLASSIFIER)
    for name, p in net.named_parameters():
        if not name.startswith(("state_enc0", "action_enc0")):
            p.data = np.zeros_like(p.data)
    g = net.score_gradient(rng.random((2, 2)), rng.normal(size=(2, 8, 2)),
                           np.zeros(2, int))
    assert np.array_equal(g, np.zeros_like(g))


def test_verifier_checkpoint_roundtrip(tmp_path, small_classifier, rng):
    path = tmp_path / "verifier.ckpt"
    small_classifier.save(path)
    loaded = VerifierNet.load(path)
    assert loaded.kind == small_classifier.kind
    assert loaded.verifier_id == small_classifier.verifier_id
    assert loaded.source_policy_id == small_classifier.source_policy_id
    states = rng.random((4, 2))
    chunks = rng.normal(size=(4, 8, 2)) * 0.02
    ts = np.arange(4)
    assert np.array_equal(small_classifier.score(states, chunks, ts),
                          loaded.score(states, chunks, ts))


# -- training ---------------------------------------------------------------

def synthetic_separable_dataset(n=40, length=4, seed=0):
    """Success iff the trajectory's states sit right of x = 0.5."""
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        label = int(i % 2 == 0)
        base = 0.75 if label else 0.25
        states = np.clip(base + rng.normal(0, 0.08, size=(length, 1)), 0, 1)
        states = np.concatenate([states, rng.random((length, 1))], axis=1)
        trajs.append(make_trajectory(states, label, rng))
    return RolloutDataset(trajectories=trajs)


def test_classifier_learns_separable_dataset():
    ds = synthetic_separable_dataset()
    cfg = VerifierTrainConfig(kind=KIND_CLASSIFIER, epochs=40, seed=0,
                              enc_dim=16, trunk_dims=(32, 16))
    net, val_losses = train_verifier(ds, cfg)
    assert len(val_losses) == 40
    pool_states = np.array([[0.9, 0.5], [0.1, 0.5], [0.8, 0.2], [0.2, 0.8]])
    chunks = np.zeros((4, 8, 2))
    scores = net.score(pool_states, chunks, np.zeros(4, int))
    assert scores[0] > 0.5 and scores[2] > 0.5
    assert scores[1] < 0.5 and scores[3] < 0.5


def test_classifier_val_accuracy_over_95_percent():
    ds = synthetic_separable_dataset(n=60)
    cfg = VerifierTrainConfig(kind=KIND_CLASSIFIER, epochs=50, seed=1,
                              enc_dim=16, trunk_dims=(32, 16))
    net, _ = train_verifier(ds, cfg)
    from dpsteer.rollouts import transition_pool
    val_pool = transition_pool(ds, ds.val_ids)
    scores = net.score(val_pool.states,
                       val_pool.chunks, val_pool.ts)
    acc = ((scores > 0.5) == (val_pool.labels == 1)).mean()
    assert acc > 0.95


def test_q_memorizes_single_success_trajectory():
    rng = np.random.default_rng(5)
    base = make_trajectory(np.linspace([0.1, 0.5], [0.9, 0.5], 12), 1, rng)
    ds = RolloutDataset(trajectories=[base] * 5)
    cfg = VerifierTrainConfig(kind=KIND_TIME_TO_SUCCESS, epochs=150, seed=0,
                              enc_dim=16, trunk_dims=(32, 16))
    net, _ = train_verifier(ds, cfg)
    pool_states = np.stack([tr.state for tr in base.transitions])
    chunks = np.stack([tr.chunk for tr in base.transitions])
    ts = np.arange(len(base.transitions))
    preds = net.score(pool_states, chunks, ts)
    targets = 0.99 ** (11 - ts)
    assert np.max(np.abs(preds - targets)) < 0.05


def test_checkpoint_selection_picks_lowest_val_loss(small_rollouts):
    cfg = VerifierTrainConfig(kind=KIND_TIME_TO_SUCCESS, epochs=12, seed=2,
                              enc_dim=8, trunk_dims=(12, 6))
    net, val_losses = train_verifier(small_rollouts, cfg)
    from dpsteer.rollouts import transition_pool
    val_pool = transition_pool(small_rollouts, small_rollouts.val_ids,
                               cfg.gamma)
    preds = net.score(val_pool.states, val_pool.chunks, val_pool.ts)
    mse = float(np.mean((preds - val_pool.q_targets) ** 2))
    assert mse == pytest.approx(min(val_losses), abs=1e-12)


def test_classifier_single_class_rejected():
    rng = np.random.default_rng(0)
    trajs = [make_trajectory(rng.random((4, 2)), 1, rng) for _ in range(6)]
    ds = RolloutDataset(trajectories=trajs)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="both"):
            train_verifier(ds, VerifierTrainConfig(kind=KIND_CLASSIFIER,
                                                   epochs=2, seed=0))


def test_unknown_kind_rejected(small_rollouts):
    with pytest.raises(ValueError, match="kind"):
        train_verifier(small_rollouts, VerifierTrainConfig(kind="oracle"))


def test_full_classifier_loss_gradcheck(rng):
    """End-to-end gradient of Eq-style composite loss through the verifier."""
    net = small_net(KIND_CLASSIFIER, seed=7)
    states = rng.random((4, 2))
    chunks = rng.normal(size=(4, 8, 2)) * 0.02
    flat = chunks.reshape(4, -1)
    ts = np.arange(4)
    labels = np.array([1.0, 1.0, 0.0, 0.0])
    cfg = ClassifierLossConfig(lambda_aux=0.5, margin=2.0)

    def loss():
        out, z = net.forward(states, flat, ts)
        zp, zn = _split_rows(z, 2)
        return classifier_loss(out, labels, zp, zn, cfg)

    err = check_gradients(loss, net.named_parameters())
    assert err < 1e-4


def _split_rows(z, k):
    """Graph-connected (top k rows, remaining rows) via selection matmuls."""
    from dpsteer import tensor as T
    n = z.data.shape[0]
    top = np.eye(n)[:k]
    bottom = np.eye(n)[k:]
    return T.matmul(Tensor(top), z), T.matmul(Tensor(bottom), z)
