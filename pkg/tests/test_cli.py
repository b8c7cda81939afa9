from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from choiceforecast.cli import DEFAULTS, main


def run(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def history(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("hist")
    code = run("gen-synthetic", "--out", out, "--years", "2010-2013", "--n-students", 80, "--n-schools", 6, "--seed", 2)
    assert code == 0
    return out


def read_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_synthetic_layout(history):
    years = sorted(p.name for p in history.iterdir() if p.is_dir())
    assert years == ["2010", "2011", "2012", "2013"]
    assert (history / "truth.json").exists()
    manifest = json.loads((history / "manifest.json").read_text())
    assert manifest["seed"] == 2 and manifest["command"] == "gen-synthetic"
    assert {"numpy", "scipy", "python"} <= set(manifest["versions"])


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("estimate") == 2
    assert run("no-such-command") == 2
    assert run("estimate", "--data", tmp_path, "--out", tmp_path, "--model", "probit") == 2
    assert run("gen-synthetic", "--out", tmp_path, "--years", "last-year") == 2


def test_missing_data_exits_3(tmp_path):
    assert run("estimate", "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 3
    assert run("da-run", "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 3


def test_estimate_logit_and_naive(history, tmp_path):
    assert run("estimate", "--data", history / "2012", "--out", tmp_path / "l", "--spec", "simple") == 0
    fit = json.loads((tmp_path / "l" / "fit.json").read_text())
    assert fit["model"] == "logit" and "distance" in fit["standard_errors"]
    assert run("estimate", "--data", history / "2012", "--out", tmp_path / "n", "--model", "naive") == 0
    assert json.loads((tmp_path / "n" / "fit.json").read_text()) == {"model": "naive"}
    manifest = json.loads((tmp_path / "l" / "manifest.json").read_text())
    assert any(k.endswith("students.csv") for k in manifest["inputs"])


def test_estimate_mixed_writes_posterior(history, tmp_path):
    out = tmp_path / "m"
    code = run("estimate", "--data", history / "2012", "--out", out, "--model", "mixed", "--iterations", 30, "--trace")
    assert code == 0
    for name in ("posterior.csv", "summary.json", "trace.csv"):
        assert (out / name).exists()
    assert json.loads((out / "summary.json").read_text())["retained_draws"] == 15


def test_forecast_pool(history, tmp_path):
    assert run("forecast-pool", "--history", history, "--target-year", 2014, "--out", tmp_path) == 0
    model = json.loads((tmp_path / "participation.json").read_text())
    assert model["target_year"] == 2014 and model["total_new"]["method"] == "trend"


def test_da_run(history, tmp_path):
    assert run("da-run", "--data", history / "2013", "--out", tmp_path) == 0
    rows = read_rows(tmp_path / "matching.csv")
    assert rows and set(rows[0]) == {"student_id", "program_id", "round_admitted"}


def test_one_simulation_is_a_usage_error(history, tmp_path):
    assert run("forecast", "--history", history, "--year", 2014, "--out", tmp_path, "--sims", 1, "--model", "naive") == 2


def test_backtest_reruns_are_byte_identical(history, tmp_path):
    args = ["backtest", "--history", history, "--year", 2013, "--sims", 5, "--spec", "simple", "--workers", 1]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "manifest.json")
    assert "rmse_summary.csv" in files and "fit.json" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    rows = read_rows(tmp_path / "a" / "rmse_summary.csv")
    assert all(0 <= float(r["p_value"]) <= 1 for r in rows if r["p_value"])
    top = read_rows(tmp_path / "a" / "top1_K1.csv")
    assert {"neighborhood", "school", "mean", "ci_low", "ci_high", "actual"} <= set(top[0])


def test_forecast_with_saved_fit(history, tmp_path):
    assert run("estimate", "--data", history / "2013", "--out", tmp_path / "fit", "--spec", "simple") == 0
    code = run("forecast", "--history", history, "--year", 2014, "--fit", tmp_path / "fit" / "fit.json",
               "--sims", 4, "--out", tmp_path / "f", "--workers", 1)
    assert code == 0
    rows = read_rows(tmp_path / "f" / "access_K1.csv")
    assert "actual" not in rows[0]
    for r in rows:
        if r["mean"]:
            assert float(r["ci_low"]) <= float(r["mean"]) <= float(r["ci_high"])


def _mean_unassigned(out: Path) -> float:
    total = 0.0
    for grade in ("K1", "K2"):
        total += sum(float(r["mean"]) for r in read_rows(out / f"unassigned_{grade}.csv") if r["mean"])
    return total


def test_more_seats_fewer_unassigned(history, tmp_path):
    common = ["forecast", "--history", history, "--year", 2014, "--sims", 4, "--model", "naive", "--workers", 1]
    assert run(*common, "--capacity-scale", 0.5, "--out", tmp_path / "half") == 0
    assert run(*common, "--capacity-scale", 3.0, "--out", tmp_path / "triple") == 0
    assert _mean_unassigned(tmp_path / "triple") < _mean_unassigned(tmp_path / "half")


def test_capacity_file_override(history, tmp_path):
    from choiceforecast.dataio import load_dataset

    programs = load_dataset(history / "2013").programs
    cap = tmp_path / "cap.csv"
    cap.write_text("program_id,capacity\n" + "".join(f"{p.program_id},0\n" for p in programs))
    code = run("forecast", "--history", history, "--year", 2014, "--sims", 2, "--model", "naive",
               "--capacities", cap, "--out", tmp_path / "z", "--workers", 1)
    assert code == 0
    for r in read_rows(tmp_path / "z" / "access_K1.csv"):
        assert r["mean"] in ("", "0")
    bad = tmp_path / "bad.csv"
    bad.write_text("program,seats\nX,1\n")
    code = run("forecast", "--history", history, "--year", 2014, "--sims", 2, "--model", "naive",
               "--capacities", bad, "--out", tmp_path / "bad")
    assert code == 3


def test_config_file_and_flag_precedence(history, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 11\nsims = 3\n[forecast]\nmodel = "naive"\nsims = 2\n')
    out = tmp_path / "c"
    assert run("forecast", "--history", history, "--year", 2014, "--out", out, "--config", cfg, "--seed", 5) == 0
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert config["model"] == "naive" and config["sims"] == 2 and config["seed"] == 5
    assert config["spec"] == DEFAULTS["spec"]
    assert run("forecast", "--history", history, "--year", 2014, "--out", out, "--config", tmp_path / "none.toml") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "choiceforecast", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
