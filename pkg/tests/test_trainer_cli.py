import json

import numpy as np
import pytest
import yaml

from conftest import tiny_run_config
from segdreamer import cli
from segdreamer.config import load_config, save_config
from segdreamer.container import MAGIC, FORMAT_VERSION
from segdreamer.errors import CheckpointError, ConfigError, NumericalError
from segdreamer.evalkit import read_summary
from segdreamer.trainer import Trainer, evaluate_policy, load_checkpoint, run


def _config_file(tmp_path, *overrides):
    path = tmp_path / "cfg.yaml"
    save_config(tiny_run_config(*overrides), path)
    return path


# --- configuration ---------------------------------------------------------------------------

def test_config_roundtrip_and_overrides(tmp_path):
    cfg = tiny_run_config("model.variant=sd_gt", "masks.p_fn_pixel=0.2")
    path = save_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert load_config(path, ["seed=3"]).seed == 3
    with pytest.raises(ConfigError, match="model.nonsense"):
        load_config(path, ["model.nonsense=1"])
    with pytest.raises(ConfigError, match="total_env_steps"):
        load_config(path, ["total_env_steps=abc"])
    with pytest.raises(ConfigError):
        load_config(path, ["env=3"])


def test_train_and_eval_seed_ranges_disjoint():
    cfg = tiny_run_config()
    assert set(cfg.train_distractor_range()).isdisjoint(cfg.eval_distractor_range())
    with pytest.raises(ConfigError):
        tiny_run_config("eval_distractor_offset=10")


# --- trainer -------------------------------------------------------------------------------

def test_zero_step_run(tmp_path):
    report = run(tiny_run_config("total_env_steps=0"), tmp_path / "r")
    assert report.env_steps == 0 and report.updates == 0 and report.checkpoint_path is None
    assert (tmp_path / "r" / "metrics.jsonl").read_text() == ""


def test_identical_runs_give_identical_logs_and_resolved_config_reproduces(tmp_path):
    cfg = tiny_run_config("model.variant=sd_selective", "masks.kind=simulated_fm")
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    log_a = (tmp_path / "a" / "metrics.jsonl").read_text()
    assert log_a and log_a == (tmp_path / "b" / "metrics.jsonl").read_text()
    resolved = load_config(tmp_path / "a" / "config.yaml")
    assert resolved == cfg
    run(resolved, tmp_path / "c")
    assert (tmp_path / "c" / "metrics.jsonl").read_text() == log_a


def test_trainer_uses_only_training_distractors(tmp_path):
    trainer = Trainer(tiny_run_config(), tmp_path / "r")
    report = trainer.run()
    assert report.updates > 0 and report.checkpoint_path.exists()
    train_range = trainer.config.train_distractor_range()
    assert trainer.train_distractor_seeds and all(s in train_range for s in trainer.train_distractor_seeds)
    names = {json.loads(l)["metric_name"] for l in (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()}
    assert {"train/provider_iou", "eval/return", "train/wm_total", "train/agent_actor_loss"} <= names


def test_checkpoint_roundtrip_and_eval_determinism(tmp_path):
    report = run(tiny_run_config("model.variant=sd_naive"), tmp_path / "r")
    cfg, wm, agent, header = load_checkpoint(report.checkpoint_path)
    assert header["env_steps"] == report.env_steps
    a = evaluate_policy(cfg, wm, agent, 3, seed=1)
    b = evaluate_policy(cfg, wm, agent, 3, seed=1)
    assert a == b
    assert all(s >= cfg.eval_distractor_offset for s in a["distractor_seeds"])
    assert len(a["head_iou"]) == 3


def test_checkpoint_version_rejected(tmp_path):
    report = run(tiny_run_config(), tmp_path / "r")
    raw = bytearray(report.checkpoint_path.read_bytes())
    raw[len(MAGIC):len(MAGIC) + 4] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    bad = tmp_path / "future.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_numerical_failure_writes_diagnostic_checkpoint(tmp_path, monkeypatch):
    trainer = Trainer(tiny_run_config(), tmp_path / "r")

    def explode():
        raise NumericalError("reward")

    monkeypatch.setattr(trainer, "train_step", explode)
    with pytest.raises(NumericalError):
        trainer.run()
    _, _, _, header = load_checkpoint(tmp_path / "r" / "checkpoints" / "diagnostic.ckpt")
    assert header["component"] == "reward"


def test_threaded_mode_completes(tmp_path):
    report = run(tiny_run_config("threaded=true"), tmp_path / "r")
    assert report.env_steps >= 120 and report.updates > 0


def test_as_input_variant_trains(tmp_path):
    report = run(tiny_run_config("model.variant=as_input", "masks.kind=simulated_fm"), tmp_path / "r")
    assert np.isfinite(report.final_return)


# --- command line ---------------------------------------------------------------------------

@pytest.mark.parametrize("verb", [None, "train", "eval", "ablate", "gen-masks", "report"])
def test_help_for_every_verb(verb, capsys):
    with pytest.raises(SystemExit) as exit_info:
        cli.main(([verb] if verb else []) + ["--help"])
    assert exit_info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_verb_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exit_info:
        cli.main(["frobnicate"])
    assert exit_info.value.code == cli.EXIT_USAGE


def test_cli_train_zero_steps_and_bad_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    cfg = _config_file(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--set", "total_env_steps=0"]) == 0
    run_dir = tmp_path / "root" / "train" / "sd_selective-seed0"
    assert (run_dir / "metrics.jsonl").read_text() == ""
    assert cli.main(["train", "--config", str(cfg), "--set", "model.varient=sd_gt"]) == cli.EXIT_USAGE
    assert "model.varient" in capsys.readouterr().err


def test_cli_override_persisted(tmp_path):
    cfg = _config_file(tmp_path, "model.variant=sd_gt")
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--set", "model.variant=sd_selective",
                     "--set", "total_env_steps=0", "--out", str(out)]) == 0
    assert yaml.safe_load((out / "config.yaml").read_text())["model"]["variant"] == "sd_selective"


def test_cli_eval_defaults_and_head_fields(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    for variant in ("dreamer", "sd_selective"):
        out = tmp_path / variant
        assert cli.main(["train", "--config", str(cfg), "--set", f"model.variant={variant}", "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(tmp_path / "dreamer" / "checkpoints" / "final.ckpt")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["episodes"] == 10 and "head_iou" not in summary
    assert cli.main(["eval", str(tmp_path / "sd_selective" / "checkpoints" / "final.ckpt"), "--episodes", "2"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert "head_iou" in first and first["episodes"] == 2
    cli.main(["eval", str(tmp_path / "sd_selective" / "checkpoints" / "final.ckpt"), "--episodes", "2"])
    assert json.loads(capsys.readouterr().out) == first


def test_cli_eval_bad_checkpoint_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(["eval", str(bad)]) == cli.EXIT_RUNTIME


def test_cli_ablate_single_cell(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfg), "--variants", "sd_gt", "--seeds", "0", "--out", str(out)]) == 0
    rows = read_summary(out / "report" / "summary.tsv")
    assert len(rows) == 1 and rows[0]["label"] == "sd_gt" and rows[0]["n_runs"] == "1"


def test_cli_ablate_unknown_variant_lists_valid_names(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    assert cli.main(["ablate", "--config", str(cfg), "--variants", "sd_gt,best", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "best" in err and "sd_selective" in err and "no_stopgrad" in err


def test_cli_ablate_grid_and_resumption(tmp_path, capsys):
    cfg = _config_file(tmp_path, "total_env_steps=80", "prefill_steps=40")
    out = tmp_path / "abl"
    args = ["ablate", "--config", str(cfg), "--variants", "sd_selective,sd_naive", "--seeds", "0,1,2",
            "--out", str(out)]
    # interrupt: complete only one cell first
    assert cli.main(["ablate", "--config", str(cfg), "--variants", "sd_naive", "--seeds", "1", "--out", str(out)]) == 0
    done = out / "sd_naive" / "seed1" / "checkpoints" / "final.ckpt"
    stamp = done.stat().st_mtime_ns
    capsys.readouterr()
    assert cli.main(args) == 0
    result = json.loads(capsys.readouterr().out)
    assert result == {"cells": 6, "ran": 5, "skipped": 1, "summary": str(out / "report" / "summary.tsv")}
    assert done.stat().st_mtime_ns == stamp
    rows = {r["label"]: r for r in read_summary(out / "report" / "summary.tsv")}
    assert set(rows) == {"sd_selective", "sd_naive"}
    for row in rows.values():
        assert row["n_runs"] == "3" and float(row["final_return_sem"]) >= 0.0
    capsys.readouterr()
    assert cli.main(args) == 0
    assert json.loads(capsys.readouterr().out)["ran"] == 0


def test_cli_gen_masks_and_report(tmp_path, capsys):
    cfg = _config_file(tmp_path, "masks.kind=simulated_fm")
    episodes = tmp_path / "eps"
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--episodes-dir", str(episodes)]) == 0
    first = sorted(episodes.glob("episode_*.sdc"))[0]
    assert cli.main(["gen-masks", str(first), "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    assert cli.main(["gen-masks", str(first), "--set", "masks.kind=external", "--adapter", "numpy:nonexistent",
                     "--out", str(tmp_path / "m")]) == 1
    assert cli.main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.tsv").exists()
    assert cli.main(["report", str(tmp_path / "nowhere"), "--out", str(tmp_path / "rep2")]) == cli.EXIT_RUNTIME
