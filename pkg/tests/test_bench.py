import csv
import json
import math

import numpy as np
import pytest

from softaug.bench import cli
from softaug.bench.compare import REFERENCE_ROW, collect_reports, compare_methods, dump_augmentation_samples, replay_specs
from softaug.bench.config import METHODS, RunConfig, build_config, dump_config, load_config, parse_lines
from softaug.bench.metrics import EvalReport, MetricsWriter, read_metrics
from softaug.bench.run import Trainer, evaluate_generalization, evaluate_policy, load_run, run_training
from softaug.augment import build_image_pool
from softaug.envsim import DISTRIBUTIONS, ConfigurationError, EnvConfig, read_ppm

TINY = {
    "env.render_size": "12", "env.crop_size": "8", "env.episode_steps": "20", "env.action_repeat": "2",
    "net.encoder_depth": "1", "net.filters": "4", "net.strides": "2", "net.feature_dim": "4",
    "net.hidden_dim": "8", "net.projection_dim": "4", "net.projection_hidden": "8",
    "sac.batch_rl": "8", "sac.warmup_steps": "40", "total_env_steps": "200", "eval_every": "100",
    "eval_episodes": "2", "final_variants": "training,color_hard", "pool_size": "3",
}


def tiny_config(method, tmp_path=None, **extra):
    entries = dict(TINY, method=method, **extra)
    if method.startswith(("soda", "augment")):
        entries.setdefault("soda.batch_soda", "8")
    if tmp_path is not None:
        entries["out_dir"] = str(tmp_path / method)
    return build_config(entries)


# -- config ---------------------------------------------------------------------


def test_empty_config_is_full_default(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.validate() == RunConfig().validate()
    d = cfg.validate()
    assert (d.sac.batch_rl, d.soda.tau, d.soda.omega, d.soda.batch_soda) == (128, 0.005, 2, 256)
    assert (d.total_env_steps, d.eval_every, d.eval_episodes) == (20_000, 2_000, 10)


def test_dotted_keys_parse_with_types(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("soda.tau = 0.005  # momentum\nsac.batch_rl = 128\nenv.task_id = push_box\n"
                    "sac.target_entropy = none\nsac.actor_detach_encoder = false\nnet.strides = 2,1\n")
    cfg = load_config(path)
    assert cfg.soda.tau == 0.005 and cfg.sac.batch_rl == 128 and cfg.env.task_id == "push_box"
    assert cfg.sac.target_entropy is None and cfg.sac.actor_detach_encoder is False
    assert cfg.net.strides == (2, 1)


@pytest.mark.parametrize(
    "text,fragment",
    [("sac.bacth_rl = 3", "sac.bacth_rl"), ("sac.batch_rl = many", "sac.batch_rl"), ("just words", "key = value")],
)
def test_config_errors_name_the_problem(tmp_path, text, fragment):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigurationError, match=fragment):
        load_config(path)


def test_method_config_consistency():
    with pytest.raises(ConfigurationError):
        build_config({"method": "sac", "soda.tau": "0.01"})
    with pytest.raises(ConfigurationError):
        build_config({"method": "rainbow"}).validate()
    with pytest.raises(ConfigurationError):
        RunConfig(method="soda_conv", soda=build_config({"method": "soda_overlay"}).soda).validate()
    assert build_config({"method": "sac"}).validate().soda is None
    assert build_config({"method": "augment_both_conv"}).validate().soda.kind == "conv"


def test_invalid_values_rejected_before_compute():
    for extra in ({"eval_episodes": "0"}, {"overlay_alpha": "1.0"}, {"final_variants": "moon"},
                  {"net.projection_dim": "9"}, {"env.crop_size": "20"}):
        with pytest.raises(ConfigurationError):
            tiny_config("soda_conv", **extra).validate()


@pytest.mark.parametrize("method", METHODS)
def test_dump_then_load_round_trips(tmp_path, method):
    cfg = tiny_config(method, tmp_path).validate()
    path = tmp_path / "dumped.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path).validate() == cfg


def test_parse_lines_skips_comments_and_blanks():
    assert parse_lines(["# c", "", "a = 1 # x", "b=two"]) == {"a": "1", "b": "two"}


# -- metrics and reports ----------------------------------------------------------


def test_metrics_are_json_lines(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as m:
        m.write("episode", 10, **{"return": 1.5, "length": 3})
        m.write("rl_update", 12, critic_loss=float("nan"))
    rows = list(read_metrics(path))
    assert rows[0] == {"type": "episode", "step": 10, "return": 1.5, "length": 3}
    assert rows[1]["critic_loss"] == "nan"
    assert [r["type"] for r in read_metrics(path, "episode")] == ["episode"]


def test_report_aggregate_and_csv_round_trip(tmp_path):
    rep = EvalReport("sac")
    rep.add("training", 0, [1.0, 3.0])
    rep.add("training", 1, [4.0, 4.0])
    rep.add("training", 2, [9.0])
    mean, std = rep.aggregate("training")
    vals = [2.0, 4.0, 9.0]
    assert mean == pytest.approx(np.mean(vals)) and std == pytest.approx(np.std(vals))
    assert rep.median("training") == 4.0
    rep.write_csv(tmp_path / "s.csv")
    back = EvalReport.read_csv(tmp_path / "s.csv")
    assert back.cells == rep.cells and back.method == "sac"
    with open(tmp_path / "s.csv") as fh:
        assert next(csv.reader(fh)) == ["method", "variant", "seed", "mean_return"]


def test_compare_one_by_one_equals_cell(tmp_path):
    rep = EvalReport("soda_overlay")
    rep.add("color_hard", 0, [12.5, 13.5])
    table = compare_methods({"soda_overlay": rep}, csv_path=tmp_path / "t.csv")
    assert "13.0±0.0*" in table
    rows = list(csv.DictReader((tmp_path / "t.csv").read_text().splitlines()))
    assert len(rows) == 1 and float(rows[0]["mean"]) == 13.0 and rows[0]["best"] == "1"


def test_compare_flags_the_best_method():
    a, b = EvalReport("sac"), EvalReport("soda_overlay")
    a.add("training", 0, [1.0])
    b.add("training", 0, [2.0])
    line = compare_methods({"sac": a, "soda_overlay": b}).splitlines()[2]
    assert line.count("*") == 1 and line.rstrip().endswith("2.0±0.0*")


def test_compare_missing_artifacts_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="summary.csv"):
        collect_reports([tmp_path / "nothing"])
    with pytest.raises(FileNotFoundError, match="video_hard"):
        rep = EvalReport("sac")
        rep.add("training", 0, [1.0])
        compare_methods({"sac": rep}, ["video_hard"])


def test_reference_row_is_documented_target():
    assert (REFERENCE_ROW["mean"], REFERENCE_ROW["std"]) == (768.0, 38.0)


# -- augmentation dumps -------------------------------------------------------------


def test_overlay_alpha_zero_dump_equals_source(tmp_path):
    env = EnvConfig(render_size=12, crop_size=8)
    dump_augmentation_samples(build_image_pool(size=2, image_size=12), ["overlay"], 3, tmp_path, env, 0, 0.0)
    assert np.array_equal(read_ppm(tmp_path / "overlay.ppm"), read_ppm(tmp_path / "source.ppm"))


def test_conv_dump_samples_are_distinct_and_replayable(tmp_path):
    env = EnvConfig(render_size=12, crop_size=8)
    pool = build_image_pool(size=2, image_size=12)
    dump_augmentation_samples(pool, ["conv", "crop"], 4, tmp_path, env, 5)
    grid = read_ppm(tmp_path / "conv.ppm")
    tiles = np.split(grid, 4, axis=1)
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(tiles[i], tiles[j])
    assert read_ppm(tmp_path / "crop.ppm").shape == (8, 32, 3)
    views = replay_specs(tmp_path / "specs.tsv", pool, env, 5, tmp_path)
    assert len(views) == 8
    raw = (tmp_path / "conv.ppm").read_bytes()
    assert raw.startswith(b"P6\n48 12\n255\n") and len(raw) == len(b"P6\n48 12\n255\n") + 48 * 12 * 3


def test_replay_detects_tampering(tmp_path):
    env = EnvConfig(render_size=12, crop_size=8)
    dump_augmentation_samples(None, ["conv"], 2, tmp_path, env, 1)
    with pytest.raises(ValueError):
        replay_specs(tmp_path / "specs.tsv", None, env, 2, tmp_path)


# -- training harness ----------------------------------------------------------------


@pytest.fixture(scope="module")
def soda_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cfg = tiny_config("soda_conv", out)
    report = run_training(cfg)
    return cfg.validate(), report, out / "soda_conv"


def test_run_writes_all_artifacts(soda_run):
    cfg, report, run_dir = soda_run
    for name in ("config.txt", "metrics.jsonl", "audit.json", "model.ckpt", "summary.csv"):
        assert (run_dir / name).exists()
    assert set(report.variants) == {"training", "color_hard"}
    assert all(math.isfinite(v) for v in report.cells.values())


def test_accounting(soda_run):
    cfg, _, run_dir = soda_run
    summary = next(read_metrics(run_dir / "metrics.jsonl", "summary"))
    episodes = list(read_metrics(run_dir / "metrics.jsonl", "episode"))
    repeat = cfg.env.action_repeat
    assert summary["env_steps"] == cfg.total_env_steps == summary["episodes"] * cfg.env.episode_steps
    assert summary["episodes"] == len(episodes)
    assert summary["rl_updates"] == (cfg.total_env_steps - cfg.sac.warmup_steps) // repeat
    assert summary["soda_updates"] == summary["rl_updates"] // cfg.soda.omega
    assert len(list(read_metrics(run_dir / "metrics.jsonl", "soda_update"))) == summary["soda_updates"]


def test_audit_matches_method_wiring(tmp_path, soda_run):
    _, _, run_dir = soda_run
    audit = json.loads((run_dir / "audit.json").read_text())
    assert set(audit["rl"]) == {"crop"} and set(audit["soda"]) == {"conv+crop"}
    run_training(tiny_config("sac_conv", tmp_path))
    audit = json.loads((tmp_path / "sac_conv" / "audit.json").read_text())
    assert set(audit["rl"]) == {"conv+crop"} and audit["soda"] == {}


def test_summary_csv_matches_report(soda_run):
    _, report, run_dir = soda_run
    assert EvalReport.read_csv(run_dir / "summary.csv").cells == report.cells


def test_saved_run_reevaluates_to_the_final_report(soda_run):
    cfg, report, run_dir = soda_run
    again = evaluate_generalization(run_dir, ["training"], cfg.eval_episodes, [cfg.seed])
    assert again.cells[("training", cfg.seed)] == report.cells[("training", cfg.seed)]
    with pytest.raises(ConfigurationError):
        evaluate_generalization(run_dir, ["underwater"], 1, [0])


def test_single_episode_eval_is_reproducible(soda_run):
    _, _, run_dir = soda_run
    a = evaluate_generalization(run_dir, ["video_hard"], 1, [3])
    b = evaluate_generalization(run_dir, ["video_hard"], 1, [3])
    assert a.cells == b.cells


def test_load_run_needs_artifacts(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run(tmp_path)


def test_zero_step_run_reports_untrained_policy(tmp_path):
    report = run_training(tiny_config("sac", tmp_path, total_env_steps="0", final_variants="training"))
    assert math.isfinite(report.cells[("training", 0)])
    summary = next(read_metrics(tmp_path / "sac" / "metrics.jsonl", "summary"))
    assert summary["rl_updates"] == 0 and summary["env_steps"] == 0


def test_untrained_policy_is_blind_to_appearance():
    # zero encoder output: the policy sees the same features under every variant
    cfg = tiny_config("sac").validate()
    tr = Trainer(cfg)
    for k in tr.agent.params:
        if k.startswith("encoder."):
            tr.agent.params[k][:] = 0
    returns = {v: evaluate_policy(tr.agent, tr.env_cfg, v, 3, 0) for v in DISTRIBUTIONS}
    for v in DISTRIBUTIONS:
        np.testing.assert_allclose(returns[v], returns["training"], rtol=1e-9)


def test_soda_without_updates_leaves_sac_trajectory_unchanged(tmp_path):
    # omega larger than the whole run: the SODA learner exists but never steps
    sac = run_training(tiny_config("sac", tmp_path))
    entries = dict(TINY, method="soda_overlay", out_dir=str(tmp_path / "soda"))
    entries.update({"soda.omega": "1000", "soda.batch_soda": "8"})
    soda = run_training(build_config(entries))
    assert soda.cells == sac.cells
    strip = lambda p: [r for r in read_metrics(p) if r["type"] != "summary"]  # noqa: E731
    assert strip(tmp_path / "sac" / "metrics.jsonl") == strip(tmp_path / "soda" / "metrics.jsonl")


def test_domain_randomization_changes_factors_per_episode():
    tr = Trainer(tiny_config("sac_dr").validate())
    seen = set()
    for _ in range(3 * tr.env_cfg.decisions_per_episode):
        tr.env_step()
        seen.add(tr.env.factors)
    assert len(seen) >= 3


# -- cli -----------------------------------------------------------------------------


def test_cli_train_eval_compare(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text("\n".join(f"{k} = {v}" for k, v in TINY.items()) + "\n")
    out = tmp_path / "run"
    code = cli.main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(out),
                     "--method", "sac", "--total_env_steps", "60"])
    assert code == 0
    assert load_config(out / "config.txt").seed == 1
    assert cli.main(["eval", "--run", str(out), "--variants", "training", "--episodes", "1"]) == 0
    assert cli.main(["compare", str(out), "--csv", str(tmp_path / "t.csv")]) == 0
    assert "sac" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text("sac.discount = 2\n")
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "0", "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg"), "--seed", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["compare", str(tmp_path / "nothing")]) == 3
    assert cli.main(["eval", "--run", str(tmp_path / "nothing")]) == 3
    assert cli.main(["dump-aug", "--out", str(tmp_path), "--kinds", "cutout"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--seed", "0"])
    assert exc.value.code == 2


def test_cli_dump_and_replay(tmp_path, capsys):
    args = ["--env.render_size", "12", "--env.crop_size", "8", "--pool_size", "2"]
    assert cli.main(["dump-aug", "--out", str(tmp_path), "--n", "2", *args]) == 0
    assert cli.main(["replay-spec", str(tmp_path / "specs.tsv"), "--check", str(tmp_path), *args]) == 0
    assert "verified 6 views" in capsys.readouterr().out
