"""Verifier-steered diffusion policy on a 2D two-door navigation task."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .env import EnvConfig, NavEnv, generate_expert_demos
from .harness import EvalReport, cross_steer, evaluate, run_pipeline
from .policy import DiffusionPolicy, PolicyTrainConfig, train_policy
from .rollouts import RolloutDataset, collect_rollouts, load_rollouts, save_rollouts
from .steering import SteeringConfig, bon_select, cg_sample, steered_rollout
from .verifiers import VerifierNet, VerifierTrainConfig, train_verifier

__all__ = [
    "DiffusionPolicy", "EnvConfig", "EvalReport", "ExperimentConfig",
    "NavEnv", "PolicyTrainConfig", "RolloutDataset", "SteeringConfig",
    "VerifierNet", "VerifierTrainConfig", "bon_select", "cg_sample",
    "collect_rollouts", "cross_steer", "evaluate", "generate_expert_demos",
    "load_config", "load_rollouts", "run_pipeline", "save_rollouts",
    "steered_rollout", "train_policy", "train_verifier",
]
