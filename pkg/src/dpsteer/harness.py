"""Pipeline orchestration: evaluation reports, the end-to-end run,
cross-policy steering, and guidance-strength sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, config_hash, save_config, stage_seed
from .env import generate_expert_demos
from .plots import plot_trajectories, plot_verifier_landscape
from .policy import DiffusionPolicy, train_policy
from .rollouts import RolloutDataset, collect_rollouts, save_rollouts
from .steering import MODE_BON, MODE_CG, MODE_NONE, SteeringConfig, make_sampler
from .trajectory import OUTCOME_SUCCESS
from .verifiers import KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS, VerifierNet, train_verifier

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, index: int, cause: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.index = index


@dataclass
class EvalReport:
    label: str
    episodes: int
    successes: int
    success_rate_pct: float
    stderr_pct: float
    outcomes: list[str]
    config_hash: str
    seed: int
    steering: dict = field(default_factory=dict)
    policy_id: str | None = None
    verifier_id: str | None = None
    on_policy: bool | None = None

    @classmethod
    def from_outcomes(cls, label, outcomes, cfg_hash, seed, **kw) -> "EvalReport":
        m = len(outcomes)
        succ = sum(1 for o in outcomes if o == OUTCOME_SUCCESS)
        p = succ / m
        se = 100.0 * float(np.sqrt(p * (1.0 - p) / m))
        return cls(label=label, episodes=m, successes=succ,
                   success_rate_pct=100.0 * p, stderr_pct=se,
                   outcomes=list(outcomes), config_hash=cfg_hash, seed=seed, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))

    def summary(self) -> str:
        return (f"{self.label}: {self.success_rate_pct:.1f}% "
                f"+- {self.stderr_pct:.1f}% ({self.successes}/{self.episodes})")


def evaluate(policy: DiffusionPolicy, verifier: VerifierNet | None,
             cfg: ExperimentConfig, steering: SteeringConfig,
             episodes: int, seed: int, label: str
             ) -> tuple[EvalReport, RolloutDataset]:
    """Run ``episodes`` labeled episodes under a steering config and
    summarize them; the trajectories come back for plotting or reuse."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    sampler = make_sampler(policy, verifier, steering)
    ds = collect_rollouts(cfg.env, sampler, episodes, seed,
                          block=cfg.eval.block,
                          meta={"policy_id": policy.policy_id,
                                "steering": steering.describe()})
    report = EvalReport.from_outcomes(
        label, [t.outcome for t in ds.trajectories], config_hash(cfg), seed,
        steering=steering.describe(), policy_id=policy.policy_id,
        verifier_id=verifier.verifier_id if verifier is not None else None,
        on_policy=(verifier.source_policy_id == policy.policy_id)
        if verifier is not None else None)
    return report, ds


def sweep_lambda(policy: DiffusionPolicy, verifier: VerifierNet,
                 cfg: ExperimentConfig, lambdas, episodes: int, seed: int
                 ) -> dict:
    """Guided evaluation at several strengths, plus the paired-seed base."""
    base, _ = evaluate(policy, None, cfg, SteeringConfig(mode=MODE_NONE),
                       episodes, seed, "base")
    rows = []
    for lam in lambdas:
        rep, _ = evaluate(policy, verifier, cfg,
                          SteeringConfig(mode=MODE_CG, cg_lambda=float(lam),
                                         grad_cap=cfg.steering.grad_cap),
                          episodes, seed, f"cg_lambda_{lam}")
        rows.append({"lambda": float(lam),
                     "success_rate_pct": rep.success_rate_pct,
                     "stderr_pct": rep.stderr_pct,
                     "improvement_pct": rep.success_rate_pct - base.success_rate_pct})
        log.info("lambda %.4g: %.1f%% (base %.1f%%)", lam,
                 rep.success_rate_pct, base.success_rate_pct)
    return {"base_success_rate_pct": base.success_rate_pct,
            "episodes": episodes, "verifier_kind": verifier.kind,
            "config_hash": config_hash(cfg), "rows": rows}


def cross_steer(policy_path, verifier_path, cfg: ExperimentConfig,
                episodes: int | None = None) -> EvalReport:
    """Steer one policy with a verifier trained on (possibly) another
    policy's rollouts; the report flags whether the pairing is on-policy."""
    policy = DiffusionPolicy.load(policy_path)
    verifier = VerifierNet.load(verifier_path)
    if verifier.obs_dim != policy.obs_dim or verifier.action_dim != policy.action_dim \
            or verifier.chunk_len != policy.chunk_len:
        raise ValueError(
            f"verifier shapes (obs {verifier.obs_dim}, act {verifier.action_dim}, "
            f"chunk {verifier.chunk_len}) do not match the policy "
            f"(obs {policy.obs_dim}, act {policy.action_dim}, chunk {policy.chunk_len})"
        )
    report, _ = evaluate(
        policy, verifier, cfg,
        SteeringConfig(mode=MODE_BON, n=cfg.steering.bon_n),
        episodes or cfg.eval.episodes, stage_seed(cfg.seed, "eval"),
        f"cross_steer[{verifier.kind}]")
    return report


@dataclass
class PipelineResult:
    out_dir: str
    reports: dict[str, EvalReport]
    paths: dict[str, str]


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> PipelineResult:
    """demos -> policy -> base eval -> rollouts -> verifiers -> steered evals.

    Every artifact lands under ``out_dir`` tagged with the config hash.
    A stage failure raises StageError naming the stage; artifacts written
    by earlier stages stay on disk.
    """
    out = str(out_dir or cfg.out_dir)
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "plots"), exist_ok=True)
    chash = config_hash(cfg)
    paths: dict[str, str] = {}
    reports: dict[str, EvalReport] = {}

    def art(name: str) -> str:
        paths[name] = os.path.join(out, name)
        return paths[name]

    save_config(cfg, art("config.yaml"))

    stages = [
        ("demos", _stage_demos), ("policy", _stage_policy),
        ("eval_base", _stage_eval_base), ("rollouts", _stage_rollouts),
        ("verifiers", _stage_verifiers), ("eval_steered", _stage_eval_steered),
        ("plots", _stage_plots), ("summary", _stage_summary),
    ]
    state: dict = {"cfg": cfg, "chash": chash, "art": art, "reports": reports}
    for idx, (name, fn) in enumerate(stages):
        log.info("pipeline stage %d/%d: %s", idx + 1, len(stages), name)
        try:
            fn(state)
        except Exception as e:  # noqa: BLE001 - rewrap with stage context
            raise StageError(name, idx, e) from e
    return PipelineResult(out_dir=out, reports=reports, paths=paths)


def _stage_demos(st):
    cfg, art = st["cfg"], st["art"]
    demos = generate_expert_demos(cfg.env, cfg.demos.count,
                                  stage_seed(cfg.seed, "demos"),
                                  chunk_len=cfg.policy.chunk_len,
                                  jitter=cfg.demos.jitter)
    st["demos"] = demos
    ds = RolloutDataset(trajectories=demos,
                        meta={"source": "expert", "config_hash": st["chash"]})
    save_rollouts(art("demos.jsonl"), ds)


def _stage_policy(st):
    cfg, art = st["cfg"], st["art"]
    pcfg = dataclasses.replace(cfg.policy, seed=stage_seed(cfg.seed, "policy"))
    policy, train_report = train_policy(st["demos"], pcfg)
    st["policy"] = policy
    policy.save(art("policy.ckpt"))
    with open(art("policy_train_report.json"), "w", encoding="utf-8") as f:
        json.dump({"config_hash": st["chash"],
                   "loss_per_epoch": train_report.loss_per_epoch,
                   "chunk_std_per_epoch": train_report.chunk_std_per_epoch,
                   "epochs_run": train_report.epochs_run,
                   "stopped_early": train_report.stopped_early}, f, indent=1)


def _stage_eval_base(st):
    cfg, art = st["cfg"], st["art"]
    report, ds = evaluate(st["policy"], None, cfg, SteeringConfig(mode=MODE_NONE),
                          cfg.eval.episodes, stage_seed(cfg.seed, "eval"), "base")
    st["reports"]["base"] = report
    st["base_trajs"] = ds.trajectories
    report.save(art("report_base.json"))
    log.info(report.summary())


def _stage_rollouts(st):
    cfg, art = st["cfg"], st["art"]
    steering = SteeringConfig(mode=MODE_NONE)
    sampler = make_sampler(st["policy"], None, steering)
    ds = collect_rollouts(cfg.env, sampler, cfg.rollouts.count,
                          stage_seed(cfg.seed, "rollouts"),
                          block=cfg.rollouts.block,
                          meta={"policy_id": st["policy"].policy_id,
                                "steering": steering.describe(),
                                "config_hash": st["chash"]})
    st["rollouts"] = ds
    save_rollouts(art("rollouts.jsonl"), ds)
    log.info("rollouts: %.1f%% success", 100 * ds.labels().mean())


def _stage_verifiers(st):
    cfg, art = st["cfg"], st["art"]
    st["verifiers"] = {}
    for kind, stage in ((KIND_CLASSIFIER, "verifier_classifier"),
                        (KIND_TIME_TO_SUCCESS, "verifier_q")):
        vcfg = dataclasses.replace(cfg.verifier, kind=kind,
                                   seed=stage_seed(cfg.seed, stage))
        net, val_losses = train_verifier(st["rollouts"], vcfg,
                                         source_policy_id=st["policy"].policy_id)
        st["verifiers"][kind] = net
        net.save(art(f"verifier_{kind}.ckpt"))
        with open(art(f"verifier_{kind}_val_losses.json"), "w", encoding="utf-8") as f:
            json.dump({"config_hash": st["chash"], "val_losses": val_losses,
                       "best_epoch": int(np.argmin(val_losses))}, f, indent=1)


def _stage_eval_steered(st):
    cfg = st["cfg"]
    seed = stage_seed(cfg.seed, "eval")
    arms = [
        ("c_bon", KIND_CLASSIFIER,
         SteeringConfig(mode=MODE_BON, n=cfg.steering.bon_n)),
        ("q_bon", KIND_TIME_TO_SUCCESS,
         SteeringConfig(mode=MODE_BON, n=cfg.steering.bon_n)),
        ("c_cg", KIND_CLASSIFIER,
         SteeringConfig(mode=MODE_CG, cg_lambda=cfg.steering.cg_lambda_classifier,
                        grad_cap=cfg.steering.grad_cap)),
        ("q_cg", KIND_TIME_TO_SUCCESS,
         SteeringConfig(mode=MODE_CG, cg_lambda=cfg.steering.cg_lambda_q,
                        grad_cap=cfg.steering.grad_cap)),
    ]
    for name, kind, sc in arms:
        report, ds = evaluate(st["policy"], st["verifiers"][kind], cfg, sc,
                              cfg.eval.episodes, seed, name)
        st["reports"][name] = report
        if name == "c_bon":
            st["c_bon_trajs"] = ds.trajectories
        report.save(st["art"](f"report_{name}.json"))
        log.info(report.summary())


def _stage_plots(st):
    cfg, art = st["cfg"], st["art"]
    sample = st["demos"][:60]
    plot_trajectories(sample, cfg.env, art(os.path.join("plots", "expert_demos.svg")),
                      title="expert demos")
    plot_trajectories(st["base_trajs"][:120], cfg.env,
                      art(os.path.join("plots", "base_rollouts.svg")), title="base")
    plot_trajectories(st["c_bon_trajs"][:120], cfg.env,
                      art(os.path.join("plots", "c_bon_rollouts.svg")),
                      title="classifier x best-of-N")
    plot_verifier_landscape(st["verifiers"][KIND_CLASSIFIER], cfg.env,
                            cfg.env.start, 50,
                            art(os.path.join("plots", "landscape_classifier.svg")),
                            title="classifier landscape at start")


def _stage_summary(st):
    cfg, art = st["cfg"], st["art"]
    base = st["reports"]["base"].success_rate_pct
    summary = {
        "config_hash": st["chash"],
        "root_seed": cfg.seed,
        "policy_id": st["policy"].policy_id,
        "success_rate_pct": {k: r.success_rate_pct for k, r in st["reports"].items()},
        "successes": {k: r.successes for k, r in st["reports"].items()},
        "improvement_pct": {k: r.success_rate_pct - base
                            for k, r in st["reports"].items() if k != "base"},
    }
    with open(art("summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1)
    for k, r in st["reports"].items():
        log.info("summary %s", r.summary())
