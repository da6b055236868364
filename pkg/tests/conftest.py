from __future__ import annotations

import numpy as np
import pytest

from dpsteer.env import EnvConfig, generate_expert_demos
from dpsteer.policy import PolicyTrainConfig, train_policy
from dpsteer.rollouts import collect_rollouts, split_by_trajectory
from dpsteer.steering import PolicyChunkSampler
from dpsteer.verifiers import (KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS,
                               VerifierTrainConfig, train_verifier)


@pytest.fixture(scope="session")
def env_cfg() -> EnvConfig:
    return EnvConfig()


@pytest.fixture(scope="session")
def small_demos(env_cfg):
    return generate_expert_demos(env_cfg, 150, seed=1)


@pytest.fixture(scope="session")
def small_policy(small_demos):
    policy, _ = train_policy(small_demos, PolicyTrainConfig(epochs=25, seed=0))
    return policy


@pytest.fixture(scope="session")
def small_rollouts(env_cfg, small_policy):
    ds = collect_rollouts(env_cfg, PolicyChunkSampler(small_policy), 100,
                          seed=7, block=100)
    assert 0 < ds.labels().mean() < 1, "fixture needs both outcome classes"
    split_by_trajectory(ds, 0.8, seed=3)
    return ds


@pytest.fixture(scope="session")
def small_classifier(small_rollouts, small_policy):
    net, _ = train_verifier(
        small_rollouts, VerifierTrainConfig(kind=KIND_CLASSIFIER, epochs=20, seed=0),
        source_policy_id=small_policy.policy_id)
    return net


@pytest.fixture(scope="session")
def small_q(small_rollouts, small_policy):
    net, _ = train_verifier(
        small_rollouts, VerifierTrainConfig(kind=KIND_TIME_TO_SUCCESS, epochs=20, seed=0),
        source_policy_id=small_policy.policy_id)
    return net


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
