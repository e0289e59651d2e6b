import csv
import json
import subprocess
import sys

import pytest

from robust_stopper.cli import main

N1 = {
    "lattice": {"n_steps": 1, "dt": 1.0},
    "payoff": {"table": [[0.0], [0.0, 1.0]], "bound": 1.0},
    "penalty": {"family": "entropic", "r": 1.0},
    "grid": {"theta": [-0.5, 0.0, 0.5]},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run_job(tmp_path, job, cfg, out="out", seed=0):
    path = write_config(tmp_path, cfg)
    code = main([job, "--config", str(path), "--out", str(tmp_path / out), "--seed", str(seed)])
    return code, tmp_path / out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_value_job(tmp_path):
    code, out = run_job(tmp_path, "value", N1)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["root_value"] == 0.375
    rows = read_rows(out / "value.csv")
    assert [r["t"] for r in rows] == ["0", "1", "1"]
    assert float(rows[0]["theta"]) == -0.5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["job"] == "value" and manifest["checks_passed"]
    assert manifest["files"] == ["summary.json", "value.csv"]


def test_value_exact_mode(tmp_path):
    cfg = {**N1, "grid": "exact"}
    code, out = run_job(tmp_path, "value", cfg)
    assert code == 0
    rows = read_rows(out / "value.csv")
    assert float(rows[0]["slope"]) == 0.5
    assert json.loads((out / "summary.json").read_text())["mode"] == "exact"


def test_saddle_job(tmp_path):
    code, out = run_job(tmp_path, "saddle", N1)
    assert code == 0
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["value"] == 0.375
    theta = read_rows(out / "theta_star.csv")
    assert float(theta[0]["theta"]) == -0.5
    rb = read_rows(out / "rbsde.csv")
    assert float(rb[0]["gamma"]) == 0.375 and float(rb[0]["z"]) == 0.5
    assert (out / "sigma_star.csv").exists()


def test_oracle_job(tmp_path):
    cfg = {
        "lattice": {"n_steps": 3, "dt": 1 / 3},
        "payoff": {"name": "put", "params": {"strike": 1.0, "sigma": 0.5}},
        "penalty": {"family": "entropic", "r": 1.0},
        "grid": {"theta": [-0.9, -0.45, 0.0, 0.45, 0.9], "k": 0.9},
    }
    code, out = run_job(tmp_path, "oracle-check", cfg)
    assert code == 0
    rep = json.loads((out / "minimax.json").read_text())
    assert rep["passed"] and rep["rule_count"] == 26 and rep["policy_count"] == 5 ** 7
    assert json.loads((out / "saddle.json").read_text())["passed"]


def test_oracle_budget_exit(tmp_path):
    cfg = {**N1, "lattice": {"n_steps": 4, "dt": 0.25},
           "payoff": {"name": "constant", "params": {"value": 0.1}}, "oracle": {"cap": 100}}
    code, _ = run_job(tmp_path, "oracle-check", cfg)
    assert code == 4


def test_converge_job(tmp_path):
    cfg = {
        "lattice": {"n_steps": 10, "dt": 0.1},
        "payoff": {"name": "put", "params": {"strike": 1.0, "sigma": 0.5}},
        "penalty": {"family": "entropic", "r": 1.0},
        "converge": {"n_steps": [10, 20, 40, 80], "horizon": 1.0},
    }
    code, out = run_job(tmp_path, "converge", cfg)
    assert code == 0
    rows = read_rows(out / "converge.csv")
    assert [int(r["n_steps"]) for r in rows] == [10, 20, 40, 80]
    assert rows[0]["difference"] == "" and rows[3]["order"] != ""


def test_rho_job(tmp_path):
    cfg = {**N1, "rho": {"nu": 0, "gamma": {"level": 1}}}
    code, out = run_job(tmp_path, "rho", cfg)
    assert code == 0
    rows = read_rows(out / "rho.csv")
    assert float(rows[0]["rho"]) == -0.375


def test_outputs_are_deterministic(tmp_path):
    cfg = {
        "lattice": {"n_steps": 12, "dt": 1 / 12},
        "payoff": {"name": "put", "params": {"strike": 1.0, "sigma": 0.4}},
        "penalty": {"family": "power", "Lam": 1.0, "lam": 0.5, "Ups": 0.1},
    }
    for job in ("value", "saddle"):
        _, a = run_job(tmp_path, job, cfg, out=f"{job}_a", seed=3)
        _, b = run_job(tmp_path, job, cfg, out=f"{job}_b", seed=3)
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_payoff_csv_and_tabulated_penalty(tmp_path):
    (tmp_path / "y.csv").write_text("t,j,value\n0,0,0\n1,0,0\n1,1,1\n")
    (tmp_path / "f.csv").write_text("z,f\n-1,0.5\n-0.5,0.125\n0,0\n0.5,0.125\n1,0.5\n")
    cfg = {
        "lattice": {"n_steps": 1, "dt": 1.0},
        "payoff": {"csv": "y.csv", "bound": 1.0},
        "penalty": {"family": "tabulated", "csv": "f.csv"},
        "grid": {"theta": [-0.5, 0.0, 0.5], "k": 0.5},
    }
    code, out = run_job(tmp_path, "value", cfg)
    assert code == 0
    assert json.loads((out / "summary.json").read_text())["root_value"] == 0.375


@pytest.mark.parametrize("cfg", [
    {**N1, "lattice": {"n_steps": 1, "dt": 0.0}},
    {**N1, "penalty": {"family": "quadratic"}},
    {**N1, "payoff": {"table": [[0.0], [0.0]]}},
    {**N1, "grid": {"theta": [1.5]}},
    {"payoff": N1["payoff"]},
])
def test_config_errors_exit_2(tmp_path, cfg, capsys):
    code, _ = run_job(tmp_path, "value", cfg)
    assert code == 2
    assert "field" in capsys.readouterr().err


def test_malformed_json_exit_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["value", "--config", str(path)]) == 2
    assert main(["value", "--config", str(tmp_path / "missing.json")]) == 2


def test_assumption_violation_exit_3(tmp_path):
    cfg = {**N1, "grid": "exact",
           "penalty": {"family": "entropic", "r": 1.0,
                       "assumptions": {"psi_bound": 0.0, "growth_M": 0.1}}}
    # the minimizer bound is only needed where the worst-case tilt is built
    code, _ = run_job(tmp_path, "saddle", cfg)
    assert code == 3


def test_console_entry_point(tmp_path):
    path = write_config(tmp_path, N1)
    out = subprocess.run([sys.executable, "-m", "robust_stopper.cli", "value", "--config",
                          str(path), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    ver = subprocess.run([sys.executable, "-m", "robust_stopper.cli", "value", "--version"],
                         capture_output=True, text=True)
    assert ver.stdout.startswith("robust-stopper")
