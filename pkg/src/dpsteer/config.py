"""Experiment configuration: dataclasses, YAML loading, stable hashing.

A single root seed derives one integer substream seed per pipeline stage,
so every stage command run on its own reproduces exactly what
``run-pipeline`` does.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .env import EnvConfig
from .policy import PolicyTrainConfig
from .verifiers import KIND_CLASSIFIER, VerifierTrainConfig


@dataclass
class DemoConfig:
    count: int = 400
    jitter: float = 0.01


@dataclass
class RolloutConfig:
    count: int = 1000
    block: int = 250


@dataclass
class SteeringDefaults:
    bon_n: int = 30
    cg_lambda_classifier: float = 0.1
    cg_lambda_q: float = 0.5
    grad_cap: float | None = None
    lambda_sweep: tuple[float, ...] = (0.03, 0.1, 0.3, 0.5, 1.0)
    sweep_episodes: int = 300

    def lambda_for(self, kind: str) -> float:
        return self.cg_lambda_classifier if kind == KIND_CLASSIFIER else self.cg_lambda_q


@dataclass
class EvalConfig:
    episodes: int = 1000
    block: int = 250


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)
    policy: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)
    rollouts: RolloutConfig = field(default_factory=RolloutConfig)
    verifier: VerifierTrainConfig = field(default_factory=VerifierTrainConfig)
    steering: SteeringDefaults = field(default_factory=SteeringDefaults)
    eval: EvalConfig = field(default_factory=EvalConfig)


STAGES = ("demos", "policy", "rollouts", "verifier_classifier", "verifier_q", "eval")


def stage_seed(root_seed: int, stage: str) -> int:
    """Integer substream seed for a named pipeline stage."""
    idx = STAGES.index(stage)
    return int(np.random.SeedSequence((root_seed, idx)).generate_state(1, np.uint64)[0])


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["env"] = cfg.env.to_dict()
    return _plain(d)


_SECTION_TYPES = {
    "env": EnvConfig,
    "demos": DemoConfig,
    "policy": PolicyTrainConfig,
    "rollouts": RolloutConfig,
    "verifier": VerifierTrainConfig,
    "steering": SteeringDefaults,
    "eval": EvalConfig,
}


def _build_section(cls, data: dict):
    if cls is EnvConfig:
        return EnvConfig.from_dict(data)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            base = dataclasses.asdict(getattr(ExperimentConfig(), key)) \
                if cls is not EnvConfig else EnvConfig().to_dict()
            section = data.pop(key) or {}
            unknown = set(section) - set(base)
            if unknown:
                raise ValueError(f"unknown {key} keys: {sorted(unknown)}")
            base.update(section)
            kwargs[key] = _build_section(cls, base)
    extra = set(data) - {"seed", "out_dir"}
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    return ExperimentConfig(**kwargs)


def load_config(path=None) -> ExperimentConfig:
    """Defaults overlaid with the YAML file, if one is given."""
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
