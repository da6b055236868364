import json

import numpy as np
import pytest

from dpsteer.rollouts import (collect_rollouts, contrastive_epoch_pairs,
                              episode_seed, load_rollouts,
                              sample_contrastive_pairs, save_rollouts,
                              split_by_trajectory, transition_pool,
                              RolloutDataset)
from dpsteer.steering import PolicyChunkSampler
from dpsteer.trajectory import (OUTCOME_COLLISION, OUTCOME_SUCCESS,
                                Trajectory, Transition)


def synthetic_trajectory(label: int, length: int, traj_seed: int) -> Trajectory:
    rng = np.random.default_rng(traj_seed)
    transitions = [Transition(state=rng.random(2), chunk=rng.normal(size=(8, 2)),
                              t=t) for t in range(length)]
    return Trajectory(
        transitions=transitions, success=label,
        success_step=length - 1 if label else None,
        outcome=OUTCOME_SUCCESS if label else OUTCOME_COLLISION,
        meta={"seed": traj_seed},
        path=rng.random((length * 8 + 1, 2)),
    )


def synthetic_dataset(n_pos: int, n_neg: int, length: int = 5) -> RolloutDataset:
    trajs = [synthetic_trajectory(1, length, i) for i in range(n_pos)]
    trajs += [synthetic_trajectory(0, length, 100 + i) for i in range(n_neg)]
    return RolloutDataset(trajectories=trajs)


# -- collection -----------------------------------------------------------

def test_collect_structure_and_determinism(env_cfg, small_policy):
    sampler = PolicyChunkSampler(small_policy)
    a = collect_rollouts(env_cfg, sampler, 6, seed=11, block=3)
    b = collect_rollouts(env_cfg, sampler, 6, seed=11, block=6)
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.outcome == tb.outcome
        assert np.array_equal(ta.path, tb.path)
        for xa, xb in zip(ta.transitions, tb.transitions):
            assert np.array_equal(xa.chunk, xb.chunk)
            assert xa.t == xb.t
    for i, traj in enumerate(a.trajectories):
        assert traj.meta["episode"] == i
        assert [tr.t for tr in traj.transitions] == list(range(len(traj)))


def test_collect_count_validation(env_cfg, small_policy):
    with pytest.raises(ValueError):
        collect_rollouts(env_cfg, PolicyChunkSampler(small_policy), 0, seed=0)


def test_collision_keeps_transitions_up_to_colliding_chunk(small_rollouts):
    for traj in small_rollouts.trajectories:
        if traj.outcome == OUTCOME_COLLISION:
            steps = len(traj.path) - 1
            assert len(traj.transitions) == -(-steps // 8)
            break
    else:
        pytest.skip("no collision in fixture")


def test_episode_seed_independent_of_count():
    a = episode_seed(123, 7)
    b = episode_seed(123, 7)
    assert a.entropy == b.entropy and a.spawn_key == b.spawn_key


# -- persistence ----------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path, small_rollouts):
    path = tmp_path / "rollouts.jsonl"
    save_rollouts(path, small_rollouts)
    loaded = load_rollouts(path)
    assert len(loaded) == len(small_rollouts)
    for ta, tb in zip(small_rollouts.trajectories, loaded.trajectories):
        assert ta.success == tb.success
        assert ta.success_step == tb.success_step
        assert ta.outcome == tb.outcome
        assert np.array_equal(ta.path, tb.path)
        for xa, xb in zip(ta.transitions, tb.transitions):
            assert np.array_equal(xa.state, xb.state)
            assert np.array_equal(xa.chunk, xb.chunk)
            assert xa.t == xb.t


def test_load_rejects_other_files(tmp_path):
    path = tmp_path / "not_rollouts.jsonl"
    path.write_text(json.dumps({"kind": "other"}) + "\n")
    with pytest.raises(ValueError):
        load_rollouts(path)


# -- splitting --------------------------------------------------------------

def test_split_80_20_disjoint():
    ds = synthetic_dataset(5, 5)
    train, val = split_by_trajectory(ds, 0.8, seed=0)
    assert len(train) == 8 and len(val) == 2
    assert not set(train) & set(val)
    assert sorted(train + val) == list(range(10))


def test_split_stratified_both_classes():
    ds = synthetic_dataset(5, 5)
    train, val = split_by_trajectory(ds, 0.8, seed=1)
    labels = ds.labels()
    assert {labels[i] for i in train} == {0, 1}
    assert {labels[i] for i in val} == {0, 1}


def test_split_no_transition_leakage():
    ds = synthetic_dataset(6, 4)
    train, val = split_by_trajectory(ds, 0.8, seed=2)
    tr_pool = transition_pool(ds, train)
    va_pool = transition_pool(ds, val)
    assert not set(tr_pool.traj_ids.tolist()) & set(va_pool.traj_ids.tolist())


def test_split_validation_errors():
    ds = synthetic_dataset(1, 0)
    with pytest.raises(ValueError):
        split_by_trajectory(ds, 0.8)
    ds = synthetic_dataset(3, 3)
    with pytest.raises(ValueError):
        split_by_trajectory(ds, 1.5)


def test_split_single_class_warns():
    ds = synthetic_dataset(4, 0)
    with pytest.warns(UserWarning, match="single class"):
        split_by_trajectory(ds, 0.8, seed=0)


# -- transition pools and q targets -----------------------------------------

def test_transition_pool_q_targets():
    ds = synthetic_dataset(1, 1, length=4)
    pool = transition_pool(ds, [0, 1], gamma=0.9)
    pos = pool.labels == 1
    assert np.allclose(pool.q_targets[pos], [0.9 ** 3, 0.9 ** 2, 0.9, 1.0])
    assert np.array_equal(pool.q_targets[~pos], np.zeros(4))


# -- contrastive pairing -----------------------------------------------------

def test_pairs_span_labels_and_counts():
    ds = synthetic_dataset(1, 1, length=6)
    pool, pos_idx, neg_idx = sample_contrastive_pairs(ds, batch=4, seed=0)
    assert len(pos_idx) == len(neg_idx) == 4
    assert np.all(pool.labels[pos_idx] == 1)
    assert np.all(pool.labels[neg_idx] == 0)


def test_epoch_pairs_cover_every_transition_once():
    ds = synthetic_dataset(2, 3, length=5)
    pool = transition_pool(ds, range(5))
    rng = np.random.default_rng(0)
    pos_idx, neg_idx = contrastive_epoch_pairs(pool, rng)
    assert len(pos_idx) == len(pool)
    # every success transition anchors a pair, and so does every failure
    assert set(pool.pos_ids().tolist()) <= set(pos_idx.tolist())
    assert set(pool.neg_ids().tolist()) <= set(neg_idx.tolist())
    assert np.all(pool.labels[pos_idx] == 1)
    assert np.all(pool.labels[neg_idx] == 0)


def test_single_class_pairing_rejected():
    ds = synthetic_dataset(2, 0)
    pool = transition_pool(ds, range(2))
    with pytest.raises(ValueError):
        contrastive_epoch_pairs(pool, np.random.default_rng(0))


def test_partner_timestep_frequency_uniform():
    # One success transition paired against a 10-step failure trajectory:
    # per epoch each failure timestep anchors once, plus exactly one gets
    # drawn as the success anchor's partner. Subtracting the anchor counts
    # leaves a multinomial over timesteps that must look uniform.
    L, epochs = 10, 10_000
    trajs = [synthetic_trajectory(1, 1, 0), synthetic_trajectory(0, L, 1)]
    ds = RolloutDataset(trajectories=trajs)
    pool = transition_pool(ds, [0, 1])
    rng = np.random.default_rng(42)
    counts = np.zeros(L)
    for _ in range(epochs):
        _, neg_idx = contrastive_epoch_pairs(pool, rng)
        np.add.at(counts, pool.ts[neg_idx], 1)
    partner_counts = counts - epochs  # remove the one anchor visit per epoch
    assert partner_counts.sum() == epochs
    expected = epochs / L
    sigma = np.sqrt(epochs * (1 / L) * (1 - 1 / L))
    assert np.all(np.abs(partner_counts - expected) <= 3 * sigma), partner_counts


def test_chunk_execution_granularity(small_rollouts):
    """All 8 actions of a chunk execute before the next query; only the
    terminal chunk may cut short."""
    for traj in small_rollouts.trajectories:
        steps = len(traj.path) - 1
        full, last = divmod(steps, 8)
        expected = full + (1 if last else 0)
        assert len(traj.transitions) == expected
        assert 1 <= steps - 8 * (len(traj.transitions) - 1) <= 8


def test_successful_rollouts_stay_out_of_solid_wall(env_cfg, small_rollouts):
    from dpsteer.env import segment_hits_wall
    checked = 0
    for traj in small_rollouts.trajectories:
        if traj.outcome != OUTCOME_SUCCESS:
            continue
        for p, q in zip(traj.path[:-1], traj.path[1:]):
            assert not segment_hits_wall(env_cfg, p, q)
        checked += 1
    assert checked > 0
