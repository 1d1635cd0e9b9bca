import csv
import json
from pathlib import Path

import pytest

from hetlb import cli
from hetlb.core import load_spec
from hetlb.equilibrium import solve_equilibrium
from hetlb.simulator import SimConfig, run_replications, summarize

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def latest(root: Path) -> Path:
    return root / (root / "latest").read_text().strip()


def test_fixed_point_single_type(tmp_path, capsys):
    code, out, _ = run(["run", "fixed_point", "--spec", str(CONFIGS / "single_type.conf"), "--out", str(tmp_path)], capsys)
    assert code == 0 and "fixed_point" in out
    d = latest(tmp_path)
    assert d.name.startswith("fixed_point_")
    summary = json.loads((d / "summary.json").read_text())
    assert summary["P1"][0] == pytest.approx(0.6, abs=1e-10)
    rows = list(csv.DictReader(open(d / "equilibrium.csv")))
    assert float(rows[1]["P"]) == pytest.approx(0.6)


def test_cli_matches_library(tmp_path, capsys):
    spec_path = CONFIGS / "two_speed.conf"
    code, _, _ = run(["run", "--experiment", "simulate", "--spec", str(spec_path), "--set", "N=10", "--set", "horizon=500",
                      "--replications", "5", "--seed", "3", "--out", str(tmp_path), "--quiet"], capsys)
    assert code == 0
    stats = json.loads((latest(tmp_path) / "stats.json").read_text())
    cfg = SimConfig(load_spec(spec_path), 10, horizon=500, seed=3)
    direct = summarize(cfg, run_replications(cfg, 5)).to_json()
    assert stats == json.loads(json.dumps(direct))

    code, _, _ = run(["run", "fixed_point", "--spec", str(spec_path), "--set", "scheme=scheme2", "--out", str(tmp_path)], capsys)
    summary = json.loads((latest(tmp_path) / "summary.json").read_text())
    assert summary["mean_sojourn"] == solve_equilibrium(load_spec(spec_path), "scheme2").mean_sojourn


def test_bad_gamma_exit_2(tmp_path, capsys):
    code, _, err = run(["run", "fixed_point", "--spec", str(CONFIGS / "two_speed.conf"), "--set", "gamma=[0.5, 0.4]",
                        "--out", str(tmp_path)], capsys)
    assert code == 2
    msg = json.loads(err)
    assert msg["error"] == "config" and msg["field"] == "gamma"


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("M = 1\ngamma = [1]\nC = [1]\nd = [2]\nlambda = 0.5\ncolour = 3\n")
    code, _, err = run(["run", "fixed_point", "--spec", str(bad), "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["line"] == 6
    code, _, err = run(["run", "fixed_point", "--spec", str(tmp_path / "missing.conf")], capsys)
    assert code == 2
    code, _, err = run(["run", "nonsense"], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = run(["run", "fixed_point", "--seed", "4", "--spec", str(CONFIGS / "two_speed.conf")], capsys)
    assert code == 2


def test_unstable_fixed_point_exit_3(tmp_path, capsys):
    code, _, err = run(["run", "fixed_point", "--spec", str(CONFIGS / "comparison.conf"), "--set", "lambda=1.1",
                        "--out", str(tmp_path)], capsys)
    assert code == 3 and json.loads(err)["error"] == "solver"


def test_tolerance_failure_exit_4(tmp_path, capsys):
    # chaos at tiny N and horizon cannot meet the 0.05 limit
    code, _, err = run(["run", "chaos", "--spec", str(CONFIGS / "comparison.conf"), "--set", "Ns=[20, 40]",
                        "--set", "horizon=300", "--set", "replications=2", "--out", str(tmp_path), "--quiet"], capsys)
    summary = json.loads((latest(tmp_path) / "summary.json").read_text())
    assert not summary["passed"] and code == 4
    assert json.loads(err)["error"] == "tolerance"


def test_integrate_and_comparison(tmp_path, capsys):
    code, out, _ = run(["run", "integrate", "--spec", str(CONFIGS / "two_speed.conf"), "--set", "t_end=20", "--set", "K=30",
                        "--out", str(tmp_path)], capsys)
    assert code == 0 and "distance" in out
    assert (latest(tmp_path) / "trajectory.csv").exists()
    code, out, _ = run(["run", "scheme_comparison", "--spec", str(CONFIGS / "comparison.conf"), "--set", "lambdas=[0.9]",
                        "--set", "N=20", "--set", "horizon=2000", "--set", "replications=5", "--set", "routing=proportional",
                        "--out", str(tmp_path)], capsys)
    assert code in (0, 4)
    rows = list(csv.DictReader(open(latest(tmp_path) / "rows.csv")))
    assert len(rows) == 4


def test_describe(capsys):
    code, out, _ = run(["describe", str(CONFIGS / "comparison.conf")], capsys)
    assert code == 0 and "rho = 0.9" in out and "STABLE" in out
    code, out, _ = run(["describe", "--spec", str(CONFIGS / "comparison.conf"), "--set", "lambda=1.2"], capsys)
    assert "UNSTABLE" in out
    code, out, _ = run(["describe", str(CONFIGS / "single_type.conf")], capsys)
    assert "Delta = 0.6" in out


def test_outdir_unique(tmp_path):
    a = cli.make_outdir(tmp_path, "simulate")
    b = cli.make_outdir(tmp_path, "simulate")
    assert a != b and latest(tmp_path) == b
