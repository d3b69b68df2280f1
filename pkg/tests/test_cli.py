"""End-to-end tests for the command line.

Most tests drive ``mart.cli.main`` in process because that is fast and the
return value is the exit code; a handful go through a real subprocess to
check module execution (``python3 -m mart``) and exit code propagation. A
small shared cohort (60 patients, 3 variables, stays of 3 to 6 hours, seed
chosen so val and test both contain both classes) keeps every pipeline run
around a second.
"""

import csv
import json
import os
import re
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mart.cli import main
from mart.config import ExperimentConfig, ModelConfig, TaskSpec, TrainConfig
from mart.data import load_dataset, native_observed_rate
from mart.training import load_checkpoint

GEN_ARGS = [
    "--patients", "60", "--vars", "3", "--tmax", "6",
    "--observed", "0.6", "--positive", "0.35", "--seed", "4",
]


def tiny_config(**train_overrides):
    train = dict(pretrain_epochs=2, finetune_epochs=3, unfreeze_epoch=1,
                 batch_size=16, seed=1)
    train.update(train_overrides)
    return ExperimentConfig(
        model=ModelConfig(n_variables=3, d=8, heads=2, layers=1),
        train=TrainConfig(**train),
    )


def run_module(*args):
    """Run ``python3 -m <module> <args...>`` with src/ importable."""
    src = str(Path(__file__).resolve().parents[1] / "src")
    env = dict(os.environ)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.run([sys.executable, "-m", *args],
                          capture_output=True, text=True, env=env)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: dataset, config, one pretrain run, one fine-tune run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate", "--out", str(data), *GEN_ARGS]) == 0
    cfg_path = root / "config.ini"
    tiny_config().to_file(cfg_path)
    pre = root / "pretrain"
    assert main(["pretrain", "--data", str(data), "--out", str(pre),
                 "--config", str(cfg_path)]) == 0
    fin = root / "finetune"
    assert main(["finetune", "--data", str(data), "--out", str(fin),
                 "--config", str(cfg_path),
                 "--checkpoint", str(pre / "pretrain.ckpt")]) == 0
    return {"root": root, "data": data, "config": cfg_path,
            "pretrain": pre, "finetune": fin}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# generate


def test_generate_reports_sizes_and_rates(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["generate", "--out", str(out), *GEN_ARGS]) == 0
    stdout = capsys.readouterr().out
    assert "train 48 / val 6 / test 6" in stdout
    match = re.search(r"observed rate ([0-9.]+), positive rate ([0-9.]+)", stdout)
    assert match is not None
    assert abs(float(match.group(1)) - 0.6) < 0.05
    for name in ("train.csv", "val.csv", "test.csv", "spec.json"):
        assert (out / name).exists()
    splits = load_dataset(out)
    assert [len(splits[s]) for s in ("train", "val", "test")] == [48, 6, 6]
    assert splits["train"][0].n_variables == 3


def test_generate_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["generate", "--out", str(a), *GEN_ARGS]) == 0
    assert main(["generate", "--out", str(b), *GEN_ARGS]) == 0
    other = GEN_ARGS[:-1] + ["5"]
    assert main(["generate", "--out", str(c), *other]) == 0
    for name in ("train.csv", "val.csv", "test.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "train.csv").read_bytes() != (c / "train.csv").read_bytes()


def test_generate_rejects_bad_spec(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "x"),
                 "--patients", "5", "--vars", "3", "--tmax", "6"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "at least 10 patients" in err


# argument handling


def test_usage_errors_exit_1():
    for argv in ([], ["frobnicate"], ["generate"], ["eval", "--data", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1


def test_help_exits_0(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    stdout = capsys.readouterr().out
    for name in ("generate", "pretrain", "finetune", "eval", "sweep", "ablate"):
        assert name in stdout


def test_deterministic_flag_is_accepted(ws, capsys):
    assert main(["eval", "--data", str(ws["data"]),
                 "--checkpoint", str(ws["finetune"] / "model.ckpt"),
                 "--deterministic"]) == 0
    capsys.readouterr()


# pretrain


def test_pretrain_outputs(ws):
    out = ws["pretrain"]
    assert (out / "pretrain.ckpt").exists()
    rows = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    for row in rows:
        assert set(row) == {"stage", "epoch", "loss", "val_metric", "seconds"}
        assert row["stage"] == "pretrain"
        assert row["val_metric"] is None
        assert np.isfinite(row["loss"])
    echo = ExperimentConfig.from_file(out / "config.ini")
    assert echo.train.pretrain_epochs == 2
    assert echo.data_dir == str(ws["data"])


def test_pretrain_resume_matches_one_shot(ws, tmp_path):
    first = tmp_path / "first"
    assert main(["pretrain", "--data", str(ws["data"]), "--out", str(first),
                 "--config", str(ws["config"]), "--epochs", "1"]) == 0
    resumed = tmp_path / "resumed"
    assert main(["pretrain", "--data", str(ws["data"]), "--out", str(resumed),
                 "--config", str(ws["config"]), "--epochs", "2",
                 "--resume", str(first / "pretrain.ckpt")]) == 0
    # stopping after epoch 0 and resuming through epoch 1 reproduces the
    # uninterrupted two epoch run byte for byte, optimizer moments included
    assert (resumed / "pretrain.ckpt").read_bytes() == \
        (ws["pretrain"] / "pretrain.ckpt").read_bytes()
    rows = [json.loads(line) for line in (resumed / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1]


def test_pretrain_resume_guards(ws, tmp_path, capsys):
    rc = main(["pretrain", "--data", str(ws["data"]), "--out", str(tmp_path / "a"),
               "--config", str(ws["config"]),
               "--resume", str(ws["finetune"] / "model.ckpt")])
    assert rc == 1
    assert "cannot resume" in capsys.readouterr().err

    wide = tiny_config()
    wide = ExperimentConfig(model=ModelConfig(n_variables=3, d=16, heads=2, layers=1),
                            train=wide.train)
    wide.to_file(tmp_path / "wide.ini")
    rc = main(["pretrain", "--data", str(ws["data"]), "--out", str(tmp_path / "b"),
               "--config", str(tmp_path / "wide.ini"),
               "--resume", str(ws["pretrain"] / "pretrain.ckpt")])
    assert rc == 1
    assert "architecture differs" in capsys.readouterr().err


def test_pretrain_seed_override(ws, tmp_path):
    base = tmp_path / "base"
    other = tmp_path / "other"
    common = ["pretrain", "--data", str(ws["data"]), "--config", str(ws["config"]),
              "--epochs", "1"]
    assert main(common + ["--out", str(base)]) == 0
    assert main(common + ["--out", str(other), "--seed", "7"]) == 0
    assert ExperimentConfig.from_file(other / "config.ini").train.seed == 7
    a = load_checkpoint(base / "pretrain.ckpt").model
    b = load_checkpoint(other / "pretrain.ckpt").model
    assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_numeric_failure_exits_2(ws, tmp_path):
    bad = tmp_path / "explode.ini"
    tiny_config(lr=1e300).to_file(bad)
    proc = run_module("mart.cli", "pretrain", "--data", str(ws["data"]),
                      "--out", str(tmp_path / "out"), "--config", str(bad))
    assert proc.returncode == 2
    assert "numeric failure" in proc.stderr


# finetune


def test_finetune_outputs(ws):
    out = ws["finetune"]
    report = json.loads((out / "metrics.json").read_text())
    assert set(report) == {"auprc", "auroc", "f1", "f1_threshold", "ma_roc",
                           "mi_roc", "min_se_pplus", "n", "task"}
    assert report["task"] == "binary"
    assert report["n"] == 6
    for key in ("auprc", "auroc", "f1", "min_se_pplus"):
        assert 0.0 <= report[key] <= 1.0
    assert report["ma_roc"] is None and report["mi_roc"] is None

    rows = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert all(r["stage"] == "finetune" for r in rows)
    assert all(r["val_metric"] is not None for r in rows)

    ckpt = load_checkpoint(out / "model.ckpt")
    assert ckpt.stage == "finetune"
    assert ckpt.model.task.kind == "binary"


def test_finetune_is_reproducible(ws, tmp_path):
    again = tmp_path / "again"
    assert main(["finetune", "--data", str(ws["data"]), "--out", str(again),
                 "--config", str(ws["config"]),
                 "--checkpoint", str(ws["pretrain"] / "pretrain.ckpt")]) == 0
    assert (again / "model.ckpt").read_bytes() == \
        (ws["finetune"] / "model.ckpt").read_bytes()
    assert (again / "metrics.json").read_bytes() == \
        (ws["finetune"] / "metrics.json").read_bytes()


def test_finetune_from_scratch_differs(ws, tmp_path):
    out = tmp_path / "scratch"
    assert main(["finetune", "--data", str(ws["data"]), "--out", str(out),
                 "--config", str(ws["config"])]) == 0
    a = load_checkpoint(out / "model.ckpt").model
    b = load_checkpoint(ws["finetune"] / "model.ckpt").model
    assert set(a.params) == set(b.params)
    assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_finetune_guards(ws, tmp_path, capsys):
    multi = ExperimentConfig(model=ModelConfig(n_variables=3, d=8, heads=2, layers=1),
                             train=tiny_config().train,
                             task=TaskSpec(kind="multiclass", n_outputs=3))
    multi.to_file(tmp_path / "multi.ini")
    rc = main(["finetune", "--data", str(ws["data"]), "--out", str(tmp_path / "a"),
               "--config", str(tmp_path / "multi.ini"),
               "--checkpoint", str(ws["finetune"] / "model.ckpt")])
    assert rc == 1
    assert "task differs" in capsys.readouterr().err


def test_zero_epoch_finetune_keeps_init(ws, tmp_path):
    first = tmp_path / "e0a"
    second = tmp_path / "e0b"
    args = ["finetune", "--data", str(ws["data"]), "--config", str(ws["config"]),
            "--epochs", "0"]
    assert main(args + ["--out", str(first)]) == 0
    assert main(args + ["--out", str(second)]) == 0
    assert (first / "log.jsonl").read_text() == ""
    report = json.loads((first / "metrics.json").read_text())
    assert 0.0 <= report["auprc"] <= 1.0
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()
    assert (first / "metrics.json").read_bytes() == (second / "metrics.json").read_bytes()


def test_config_dataset_mismatch(tmp_path, capsys):
    data = tmp_path / "data4"
    assert main(["generate", "--out", str(data), "--patients", "20", "--vars", "4",
                 "--tmax", "5", "--observed", "0.6", "--positive", "0.3"]) == 0
    cfg = tmp_path / "cfg.ini"
    tiny_config().to_file(cfg)
    rc = main(["pretrain", "--data", str(data), "--out", str(tmp_path / "out"),
               "--config", str(cfg)])
    assert rc == 1
    assert "expects 3 variables but the dataset has 4" in capsys.readouterr().err


# eval


def test_eval_matches_finetune_report(ws, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(ws["data"]),
                 "--checkpoint", str(ws["finetune"] / "model.ckpt"),
                 "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert (out / "metrics.json").read_bytes() == \
        (ws["finetune"] / "metrics.json").read_bytes()
    assert json.loads(stdout) == json.loads((out / "metrics.json").read_text())
    echo = json.loads((out / "eval_config.json").read_text())
    assert echo["split"] == "test"


def test_eval_split_selection(ws, capsys):
    ckpt = str(ws["finetune"] / "model.ckpt")
    assert main(["eval", "--data", str(ws["data"]), "--checkpoint", ckpt,
                 "--split", "train"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 48
    assert main(["eval", "--data", str(ws["data"]), "--checkpoint", ckpt,
                 "--split", "val"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 6


def test_eval_rejects_headless_checkpoint(ws, capsys):
    rc = main(["eval", "--data", str(ws["data"]),
               "--checkpoint", str(ws["pretrain"] / "pretrain.ckpt")])
    assert rc == 1
    assert "no task head" in capsys.readouterr().err


# sweep


def test_sweep_full_rate_matches_eval(ws, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--data", str(ws["data"]), "--out", str(out),
                 "--checkpoint", str(ws["finetune"] / "model.ckpt"),
                 "--rates", "1.0,0.5", "--seeds", "1,2"]) == 0
    capsys.readouterr()
    rows = read_rows(out / "sweep.csv")
    assert list(rows[0]) == ["rate", "seed", "auprc", "auroc", "f1"]
    assert [(r["rate"], r["seed"]) for r in rows] == \
        [("1.0", "1"), ("1.0", "2"), ("0.5", "1"), ("0.5", "2")]

    # keeping every observation reproduces the plain eval metrics exactly,
    # independent of the subsampling seed
    report = json.loads((ws["finetune"] / "metrics.json").read_text())
    for row in rows[:2]:
        assert float(row["auprc"]) == report["auprc"]
        assert float(row["auroc"]) == report["auroc"]
        assert float(row["f1"]) == report["f1"]
    for row in rows[2:]:
        assert 0.0 <= float(row["auprc"]) <= 1.0

    summary = read_rows(out / "sweep_summary.csv")
    full = next(r for r in summary if r["rate"] == "1.0")
    assert float(full["auprc_mean"]) == report["auprc"]
    assert float(full["auprc_std"]) == 0.0

    echo = json.loads((out / "sweep_config.json").read_text())
    assert echo["mode"] == "test-only"
    assert echo["absolute"] is False
    assert echo["rates"] == [1.0, 0.5]


def test_sweep_absolute_skips_above_native(ws, tmp_path, capsys):
    native = native_observed_rate(load_dataset(ws["data"])["test"])
    assert 0.2 < native < 0.95  # keeps the rates below meaningful
    out = tmp_path / "sweep"
    assert main(["sweep", "--data", str(ws["data"]), "--out", str(out),
                 "--checkpoint", str(ws["finetune"] / "model.ckpt"),
                 "--rates", "0.95,0.2", "--seeds", "1", "--absolute"]) == 0
    captured = capsys.readouterr()
    assert "skipping rate 0.95" in captured.err
    rows = read_rows(out / "sweep.csv")
    assert [r["rate"] for r in rows] == ["0.2"]
    assert json.loads((out / "sweep_config.json").read_text())["absolute"] is True


def test_sweep_retrain_mode(ws, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--data", str(ws["data"]), "--out", str(out),
                 "--config", str(ws["config"]), "--sweep-mode", "retrain",
                 "--rates", "0.6", "--seeds", "1"]) == 0
    capsys.readouterr()
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 1
    assert 0.0 <= float(rows[0]["auprc"]) <= 1.0


def test_sweep_guards(ws, tmp_path, capsys):
    data, out = str(ws["data"]), str(tmp_path / "x")
    ckpt = str(ws["finetune"] / "model.ckpt")
    cases = [
        (["sweep", "--data", data, "--out", out], "needs --checkpoint"),
        (["sweep", "--data", data, "--out", out, "--sweep-mode", "retrain",
          "--checkpoint", ckpt], "drop --checkpoint"),
        (["sweep", "--data", data, "--out", out, "--checkpoint", ckpt,
          "--rates", "0.0,0.5"], "rates must lie in (0, 1]"),
        (["sweep", "--data", data, "--out", out, "--checkpoint", ckpt,
          "--rates", "fast"], "could not parse rates"),
        (["sweep", "--data", data, "--out", out, "--checkpoint", ckpt,
          "--seeds", ","], "at least one seed"),
    ]
    for argv, needle in cases:
        assert main(argv) == 1
        assert needle in capsys.readouterr().err


# ablate


def test_ablate_runs_variants(ws, tmp_path, capsys):
    out = tmp_path / "ablate"
    assert main(["ablate", "--data", str(ws["data"]), "--out", str(out),
                 "--config", str(ws["config"]), "--variants", "full,no-cls"]) == 0
    capsys.readouterr()
    rows = read_rows(out / "ablate.csv")
    assert [r["variant"] for r in rows] == ["full", "no_cls"]
    for row in rows:
        assert 0.0 <= float(row["auprc"]) <= 1.0
    for name in ("full", "no_cls"):
        for artifact in ("model.ckpt", "metrics.json", "config.ini", "log.jsonl"):
            assert (out / name / artifact).exists()
    variant = ExperimentConfig.from_file(out / "no_cls" / "config.ini")
    assert variant.ablation.no_cls is True
    assert variant.model_with_ablations().use_cls is False
    base = ExperimentConfig.from_file(out / "config.ini")
    assert base.ablation.active() == []


def test_ablate_rejects_unknown_variant(ws, tmp_path, capsys):
    rc = main(["ablate", "--data", str(ws["data"]), "--out", str(tmp_path / "x"),
               "--variants", "bogus"])
    assert rc == 1
    assert "unknown variant 'bogus'" in capsys.readouterr().err


# entry points


def test_module_execution_help():
    for module in ("mart", "mart.cli"):
        proc = run_module(module, "--help")
        assert proc.returncode == 0
        assert "generate" in proc.stdout and "sweep" in proc.stdout


def test_console_script(tmp_path):
    exe = shutil.which("mart")
    if exe is None:
        pytest.skip("console script not on PATH (package not installed)")
    proc = subprocess.run([exe, "generate", "--out", str(tmp_path / "d"),
                           "--patients", "12", "--vars", "2", "--tmax", "4"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "d" / "train.csv").exists()
