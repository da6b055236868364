import json
import os
import re

import numpy as np
import pytest

from dpsteer.config import (ExperimentConfig, config_hash, from_dict,
                            load_config, save_config, stage_seed, to_dict)
from dpsteer.harness import EvalReport, cross_steer, evaluate, run_pipeline, sweep_lambda
from dpsteer.plots import (SIZE, MARGIN, door_corridor_mask, grid_centers,
                           landscape_scores, plot_trajectories,
                           plot_verifier_landscape, probe_chunks)
from dpsteer.steering import MODE_BON, MODE_NONE, SteeringConfig
from dpsteer import cli


# -- reports -----------------------------------------------------------------

def test_stderr_formula():
    outcomes = ["success"] * 50 + ["collision"] * 50
    rep = EvalReport.from_outcomes("x", outcomes, "hash", 0)
    assert rep.success_rate_pct == 50.0
    assert rep.stderr_pct == pytest.approx(5.0, abs=1e-12)


def test_all_success_zero_stderr():
    rep = EvalReport.from_outcomes("x", ["success"] * 40, "hash", 0)
    assert rep.success_rate_pct == 100.0
    assert rep.stderr_pct == 0.0


def test_report_roundtrip(tmp_path):
    rep = EvalReport.from_outcomes("base", ["success", "collision"], "h", 3,
                                   steering={"mode": "none"})
    path = tmp_path / "report.json"
    rep.save(path)
    again = EvalReport.load(path)
    assert again == rep


def test_evaluate_deterministic_rerun(env_cfg, small_policy):
    cfg = ExperimentConfig()
    a, _ = evaluate(small_policy, None, cfg, SteeringConfig(mode=MODE_NONE),
                    12, seed=5, label="base")
    b, _ = evaluate(small_policy, None, cfg, SteeringConfig(mode=MODE_NONE),
                    12, seed=5, label="base")
    assert a.outcomes == b.outcomes
    assert a.successes == b.successes
    with pytest.raises(ValueError):
        evaluate(small_policy, None, cfg, SteeringConfig(mode=MODE_NONE),
                 0, seed=5, label="base")


# -- config --------------------------------------------------------------------

def test_config_defaults_match_shipped_file():
    shipped = load_config(os.path.join(os.path.dirname(__file__), "..",
                                       "configs", "default.yaml"))
    assert config_hash(shipped) == config_hash(ExperimentConfig())


def test_config_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        from_dict({"pollicy": {}})
    with pytest.raises(ValueError, match="unknown"):
        from_dict({"policy": {"epoch": 3}})


def test_config_roundtrip(tmp_path):
    cfg = from_dict({"seed": 7, "policy": {"epochs": 3},
                     "env": {"goal_radius": 0.06}})
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert config_hash(cfg) == config_hash(again)
    assert again.env.goal_radius == 0.06
    assert again.policy.epochs == 3
    assert again.verifier.epochs == 200  # untouched default


def test_stage_seeds_distinct_and_stable():
    seeds = {stage: stage_seed(0, stage) for stage in
             ("demos", "policy", "rollouts", "verifier_classifier",
              "verifier_q", "eval")}
    assert len(set(seeds.values())) == len(seeds)
    assert stage_seed(0, "eval") == seeds["eval"]
    assert stage_seed(1, "eval") != seeds["eval"]


# -- plots -----------------------------------------------------------------

def test_plot_trajectories_structure(tmp_path, small_rollouts, env_cfg):
    path = tmp_path / "trajs.svg"
    plot_trajectories(small_rollouts.trajectories[:10], env_cfg, path)
    svg = path.read_text()
    assert svg.count("<polyline") == 10
    assert svg.count('class="wall"') == len(env_cfg.solid_spans())
    # documented viewport transform: px = MARGIN + SIZE * x
    xlo, _ = env_cfg.wall_band()
    want_x = MARGIN + SIZE * xlo
    m = re.search(r'<rect x="([0-9.]+)"[^>]*class="wall"', svg)
    assert float(m.group(1)) == pytest.approx(want_x, abs=0.01)
    m = re.search(r'<circle cx="([0-9.]+)" cy="([0-9.]+)"[^>]*class="goal"', svg)
    assert float(m.group(1)) == pytest.approx(MARGIN + SIZE * env_cfg.goal_x, abs=0.01)
    assert float(m.group(2)) == pytest.approx(MARGIN + SIZE * (1 - env_cfg.goal_y), abs=0.01)


def test_plot_trajectories_empty_rejected(tmp_path, env_cfg):
    with pytest.raises(ValueError):
        plot_trajectories([], env_cfg, tmp_path / "x.svg")


def test_probe_chunks_speed_cap(env_cfg):
    centers = grid_centers(4)
    chunks = probe_chunks(env_cfg, env_cfg.start, centers, 8)
    assert chunks.shape == (16, 8, 2)
    speeds = np.linalg.norm(chunks, axis=2)
    assert np.allclose(speeds, env_cfg.speed_cap, atol=1e-12)
    # constant velocity within each probe
    assert np.allclose(chunks - chunks[:, :1, :], 0.0)


def test_landscape_svg_and_tsv(tmp_path, small_classifier, env_cfg):
    path = tmp_path / "landscape.svg"
    scores = plot_verifier_landscape(small_classifier, env_cfg, env_cfg.start,
                                     50, path)
    assert scores.shape == (50, 50)
    svg = path.read_text()
    assert svg.count('class="cell"') == 2500
    tsv = np.loadtxt(tmp_path / "landscape.tsv", delimiter="\t")
    assert tsv.shape == (50, 50)
    assert np.array_equal(tsv, scores)
    with pytest.raises(ValueError):
        plot_verifier_landscape(small_classifier, env_cfg, env_cfg.start, 1,
                                tmp_path / "bad.svg")


def test_constant_verifier_uniform_heatmap(tmp_path, small_classifier, env_cfg):
    import copy
    const = copy.deepcopy(small_classifier)
    for name, p in const.named_parameters():
        if not name.startswith(("state_enc0", "action_enc0")):
            p.data = np.zeros_like(p.data)
    scores = landscape_scores(const, env_cfg, env_cfg.start, 10)
    assert scores.max() - scores.min() < 1e-12


def test_corridor_masks_disjoint(env_cfg):
    wide = door_corridor_mask(env_cfg, env_cfg.wide_door, env_cfg.start, 50)
    narrow = door_corridor_mask(env_cfg, env_cfg.narrow_door, env_cfg.start, 50)
    assert wide.sum() > 0 and narrow.sum() > 0
    assert not np.any(wide & narrow)
    centers = grid_centers(50).reshape(50, 50, 2)
    assert np.all(centers[wide][:, 0] > env_cfg.wall_x)


# -- pipeline and CLI ---------------------------------------------------------


TINY = {
    "seed": 23,
    "demos": {"count": 150},
    "policy": {"epochs": 34},
    "rollouts": {"count": 80, "block": 80},
    "verifier": {"epochs": 8},
    "eval": {"episodes": 40, "block": 40},
    "steering": {"bon_n": 4, "lambda_sweep": [0.0, 0.1], "sweep_episodes": 10},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_pipeline")
    cfg = from_dict(TINY)
    result = run_pipeline(cfg, out_dir=out)
    return cfg, result


def test_pipeline_artifacts(tiny_run):
    cfg, result = tiny_run
    assert set(result.reports) == {"base", "c_bon", "q_bon", "c_cg", "q_cg"}
    for name in ("config.yaml", "demos.jsonl", "policy.ckpt", "rollouts.jsonl",
                 "verifier_classifier.ckpt", "verifier_q.ckpt",
                 "report_base.json", "report_c_bon.json", "report_q_bon.json",
                 "report_c_cg.json", "report_q_cg.json", "summary.json"):
        assert os.path.exists(os.path.join(result.out_dir, name)), name
    chash = config_hash(cfg)
    for rep in result.reports.values():
        assert rep.config_hash == chash
        assert rep.episodes == cfg.eval.episodes
    with open(os.path.join(result.out_dir, "summary.json")) as f:
        summary = json.load(f)
    assert summary["config_hash"] == chash


def test_pipeline_all_arms_share_eval_seed(tiny_run):
    cfg, result = tiny_run
    seeds = {rep.seed for rep in result.reports.values()}
    assert seeds == {stage_seed(cfg.seed, "eval")}


def test_cross_steer_consistency_with_pipeline(tiny_run):
    cfg, result = tiny_run
    rep = cross_steer(result.paths["policy.ckpt"],
                      result.paths["verifier_classifier.ckpt"], cfg)
    assert rep.on_policy is True
    assert rep.successes == result.reports["c_bon"].successes
    assert rep.outcomes == result.reports["c_bon"].outcomes


def test_cross_steer_flags_off_policy(tiny_run, tmp_path):
    cfg, result = tiny_run
    from dpsteer.verifiers import VerifierNet
    ver = VerifierNet.load(result.paths["verifier_classifier.ckpt"])
    ver.source_policy_id = "someone-else"
    other = tmp_path / "other_verifier.ckpt"
    ver.save(other)
    rep = cross_steer(result.paths["policy.ckpt"], other, cfg, episodes=4)
    assert rep.on_policy is False


def test_sweep_lambda_report(tiny_run):
    cfg, result = tiny_run
    from dpsteer.policy import DiffusionPolicy
    from dpsteer.verifiers import VerifierNet
    policy = DiffusionPolicy.load(result.paths["policy.ckpt"])
    ver = VerifierNet.load(result.paths["verifier_q.ckpt"])
    sweep = sweep_lambda(policy, ver, cfg, [0.0, 0.5], episodes=10,
                         seed=stage_seed(cfg.seed, "eval"))
    assert [r["lambda"] for r in sweep["rows"]] == [0.0, 0.5]
    assert sweep["rows"][0]["improvement_pct"] == pytest.approx(0.0, abs=1e-9)


def test_cli_stage_composition(tiny_run, tmp_path):
    """Each CLI stage command reproduces the pipeline's artifact exactly."""
    cfg, result = tiny_run
    cfg_path = tmp_path / "cfg.yaml"
    save_config(cfg, cfg_path)

    rc = cli.main(["gen-demos", "--config", str(cfg_path),
                   "--out", str(tmp_path / "demos.jsonl")])
    assert rc == 0
    assert (tmp_path / "demos.jsonl").read_bytes() == \
        open(result.paths["demos.jsonl"], "rb").read()

    rc = cli.main(["train-policy", "--config", str(cfg_path),
                   "--demos", str(tmp_path / "demos.jsonl"),
                   "--out", str(tmp_path / "policy.ckpt")])
    assert rc == 0
    assert (tmp_path / "policy.ckpt").read_bytes() == \
        open(result.paths["policy.ckpt"], "rb").read()

    rc = cli.main(["collect", "--config", str(cfg_path),
                   "--policy", str(tmp_path / "policy.ckpt"),
                   "--out", str(tmp_path / "rollouts.jsonl")])
    assert rc == 0
    assert (tmp_path / "rollouts.jsonl").read_bytes() == \
        open(result.paths["rollouts.jsonl"], "rb").read()

    rc = cli.main(["train-verifier", "--config", str(cfg_path),
                   "--rollouts", str(tmp_path / "rollouts.jsonl"),
                   "--kind", "classifier",
                   "--out", str(tmp_path / "classifier.ckpt")])
    assert rc == 0
    assert (tmp_path / "classifier.ckpt").read_bytes() == \
        open(result.paths["verifier_classifier.ckpt"], "rb").read()

    rc = cli.main(["eval", "--config", str(cfg_path),
                   "--policy", str(tmp_path / "policy.ckpt"),
                   "--verifier", str(tmp_path / "classifier.ckpt"),
                   "--steering", "bon",
                   "--out", str(tmp_path / "report.json")])
    assert rc == 0
    rep = EvalReport.load(tmp_path / "report.json")
    assert rep.successes == result.reports["c_bon"].successes


def test_cli_lambda_sweep(tiny_run, tmp_path):
    cfg, result = tiny_run
    cfg_path = tmp_path / "cfg.yaml"
    save_config(cfg, cfg_path)
    rc = cli.main(["eval", "--config", str(cfg_path),
                   "--policy", result.paths["policy.ckpt"],
                   "--verifier", result.paths["verifier_classifier.ckpt"],
                   "--steering", "cg", "--cg-lambda", "0.0",
                   "--cg-lambda", "0.1", "--episodes", "6",
                   "--out", str(tmp_path / "sweep.json")])
    assert rc == 0
    with open(tmp_path / "sweep.json") as f:
        sweep = json.load(f)
    assert len(sweep["rows"]) == 2


def test_cli_plot_commands(tiny_run, tmp_path):
    cfg, result = tiny_run
    cfg_path = tmp_path / "cfg.yaml"
    save_config(cfg, cfg_path)
    rc = cli.main(["plot", "trajectories", "--config", str(cfg_path),
                   "--rollouts", result.paths["rollouts.jsonl"],
                   "--out", str(tmp_path / "t.svg")])
    assert rc == 0 and (tmp_path / "t.svg").exists()
    rc = cli.main(["plot", "landscape", "--config", str(cfg_path),
                   "--verifier", result.paths["verifier_classifier.ckpt"],
                   "--grid", "5", "--out", str(tmp_path / "l.svg")])
    assert rc == 0 and (tmp_path / "l.svg").exists()


def test_cli_error_paths(tmp_path):
    rc = cli.main(["eval", "--policy", str(tmp_path / "missing.ckpt"),
                   "--out", str(tmp_path / "r.json")])
    assert rc == 1
