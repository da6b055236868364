"""Command-line interface; each verb is one pipeline stage, plus
``run-pipeline`` which is exactly their composition.

Exit codes: 0 on success, 1 on usage or runtime errors, 10 + stage index
when a pipeline stage fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .config import config_hash, load_config, stage_seed
from .env import generate_expert_demos
from .harness import StageError, cross_steer, evaluate, run_pipeline, sweep_lambda
from .plots import plot_trajectories, plot_verifier_landscape
from .policy import DiffusionPolicy, train_policy
from .rollouts import RolloutDataset, collect_rollouts, load_rollouts, save_rollouts
from .steering import MODE_BON, MODE_CG, MODE_NONE, SteeringConfig, make_sampler
from .verifiers import KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS, VerifierNet, train_verifier

log = logging.getLogger("dpsteer")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config (defaults if omitted)")


def _steering_from_args(cfg, args, verifier) -> SteeringConfig:
    if args.steering == MODE_NONE:
        return SteeringConfig(mode=MODE_NONE)
    if args.steering == MODE_BON:
        return SteeringConfig(mode=MODE_BON,
                              n=args.bon_n or cfg.steering.bon_n)
    lam = args.cg_lambda[0] if args.cg_lambda else cfg.steering.lambda_for(verifier.kind)
    return SteeringConfig(mode=MODE_CG, cg_lambda=lam,
                          grad_cap=cfg.steering.grad_cap)


def cmd_gen_demos(args) -> int:
    cfg = load_config(args.config)
    count = args.count or cfg.demos.count
    demos = generate_expert_demos(cfg.env, count, stage_seed(cfg.seed, "demos"),
                                  chunk_len=cfg.policy.chunk_len,
                                  jitter=cfg.demos.jitter)
    save_rollouts(args.out, RolloutDataset(
        trajectories=demos,
        meta={"source": "expert", "config_hash": config_hash(cfg)}))
    log.info("wrote %d demos to %s", count, args.out)
    return 0


def cmd_train_policy(args) -> int:
    cfg = load_config(args.config)
    demos = load_rollouts(args.demos).trajectories
    pcfg = dataclasses.replace(cfg.policy, seed=stage_seed(cfg.seed, "policy"))
    policy, report = train_policy(demos, pcfg)
    policy.save(args.out)
    log.info("policy %s saved to %s (final loss %.4f, sample std %.4f)",
             policy.policy_id[:12], args.out,
             report.loss_per_epoch[-1], report.chunk_std_per_epoch[-1])
    return 0


def cmd_collect(args) -> int:
    cfg = load_config(args.config)
    policy = DiffusionPolicy.load(args.policy)
    verifier = VerifierNet.load(args.verifier) if args.verifier else None
    steering = _steering_from_args(cfg, args, verifier)
    sampler = make_sampler(policy, verifier, steering)
    count = args.count or cfg.rollouts.count
    ds = collect_rollouts(cfg.env, sampler, count,
                          stage_seed(cfg.seed, "rollouts"),
                          block=cfg.rollouts.block,
                          meta={"policy_id": policy.policy_id,
                                "steering": steering.describe(),
                                "config_hash": config_hash(cfg)})
    save_rollouts(args.out, ds)
    log.info("collected %d rollouts (%.1f%% success) to %s",
             count, 100 * ds.labels().mean(), args.out)
    return 0


def cmd_train_verifier(args) -> int:
    cfg = load_config(args.config)
    ds = load_rollouts(args.rollouts)
    stage = "verifier_classifier" if args.kind == KIND_CLASSIFIER else "verifier_q"
    vcfg = dataclasses.replace(cfg.verifier, kind=args.kind,
                               seed=stage_seed(cfg.seed, stage))
    net, val_losses = train_verifier(ds, vcfg,
                                     source_policy_id=ds.meta.get("policy_id"))
    net.save(args.out)
    log.info("verifier[%s] saved to %s (best val loss %.5f at epoch %d)",
             args.kind, args.out, min(val_losses),
             int(np.argmin(val_losses)))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    policy = DiffusionPolicy.load(args.policy)
    verifier = VerifierNet.load(args.verifier) if args.verifier else None
    episodes = args.episodes or cfg.eval.episodes
    seed = stage_seed(cfg.seed, "eval")
    if args.steering == MODE_CG and args.cg_lambda and len(args.cg_lambda) > 1:
        result = sweep_lambda(policy, verifier, cfg, args.cg_lambda, episodes, seed)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=1)
        best = max(result["rows"], key=lambda r: r["improvement_pct"])
        log.info("lambda sweep: base %.1f%%, best lambda %.4g -> %+.1f points",
                 result["base_success_rate_pct"], best["lambda"],
                 best["improvement_pct"])
        return 0
    steering = _steering_from_args(cfg, args, verifier)
    report, _ = evaluate(policy, verifier, cfg, steering, episodes, seed,
                         args.label or steering.mode)
    report.save(args.out)
    log.info(report.summary())
    return 0


def cmd_cross_steer(args) -> int:
    cfg = load_config(args.config)
    report = cross_steer(args.policy, args.verifier, cfg,
                         episodes=args.episodes)
    report.save(args.out)
    log.info("%s (on_policy=%s)", report.summary(), report.on_policy)
    return 0


def cmd_plot(args) -> int:
    cfg = load_config(args.config)
    if args.kind == "trajectories":
        ds = load_rollouts(args.rollouts)
        plot_trajectories(ds.trajectories[: args.limit], cfg.env, args.out)
    else:
        verifier = VerifierNet.load(args.verifier)
        plot_verifier_landscape(verifier, cfg.env, cfg.env.start,
                                args.grid, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_run_pipeline(args) -> int:
    cfg = load_config(args.config)
    try:
        result = run_pipeline(cfg, out_dir=args.out_dir)
    except StageError as e:
        log.error("%s", e)
        return 10 + e.index
    log.info("pipeline artifacts in %s", result.out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dpsteer",
        description="Train, steer, and evaluate a diffusion policy on the "
                    "two-door navigation task.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-demos", help="generate expert demonstrations")
    _add_config(sp)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_demos)

    sp = sub.add_parser("train-policy", help="behavior-clone the demo set")
    _add_config(sp)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_policy)

    sp = sub.add_parser("collect", help="collect labeled policy rollouts")
    _add_config(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--steering", choices=[MODE_NONE, MODE_BON, MODE_CG],
                    default=MODE_NONE)
    sp.add_argument("--verifier", default=None)
    sp.add_argument("--bon-n", type=int, default=None)
    sp.add_argument("--cg-lambda", type=float, action="append", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_collect)

    sp = sub.add_parser("train-verifier", help="train a verifier on rollouts")
    _add_config(sp)
    sp.add_argument("--rollouts", required=True)
    sp.add_argument("--kind", choices=[KIND_CLASSIFIER, KIND_TIME_TO_SUCCESS],
                    required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_verifier)

    sp = sub.add_parser("eval", help="evaluate a policy, optionally steered; "
                                     "repeat --cg-lambda to sweep strengths")
    _add_config(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--verifier", default=None)
    sp.add_argument("--steering", choices=[MODE_NONE, MODE_BON, MODE_CG],
                    default=MODE_NONE)
    sp.add_argument("--bon-n", type=int, default=None)
    sp.add_argument("--cg-lambda", type=float, action="append", default=None)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--label", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("cross-steer", help="steer a policy with a verifier "
                                            "trained on other rollouts")
    _add_config(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--verifier", required=True)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_cross_steer)

    sp = sub.add_parser("plot", help="emit SVG plots")
    _add_config(sp)
    sp.add_argument("kind", choices=["trajectories", "landscape"])
    sp.add_argument("--rollouts", default=None)
    sp.add_argument("--verifier", default=None)
    sp.add_argument("--limit", type=int, default=120)
    sp.add_argument("--grid", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("run-pipeline", help="run every stage end to end")
    _add_config(sp)
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(fn=cmd_run_pipeline)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as e:
        log.error("%s", e)
        return 10 + e.index
    except (ValueError, OSError, RuntimeError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
