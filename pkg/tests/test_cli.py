import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from bilevel_mpc.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_REFUSED, main
from bilevel_mpc.config import toy_config


def test_toy_command(tmp_path):
    assert main(["toy", "--out", str(tmp_path), "--verify"]) == EXIT_OK
    rep = json.loads((tmp_path / "toy_report.json").read_text())
    assert rep["theta_star"] == [pytest.approx(0.0, abs=1e-12)]
    assert all(rep["checks"].values())
    f = rep["formulations"]
    assert f["P2"]["value"] == pytest.approx(f["P3"]["value"], rel=1e-6)
    assert len(f["P0"]["X"]) == 11
    rows = list(csv.reader(open(tmp_path / "toy_trajectories.csv")))
    assert len(rows) == 12


def test_toy_horizon_one(tmp_path):
    assert main(["toy", "--out", str(tmp_path), "--horizon", "1"]) == EXIT_OK


def test_ordering_command(tmp_path):
    code = main(["ordering", "--out", str(tmp_path), "--i-list", "1-3,10", "--eps", "0,0.5", "--verify"])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "ordering.csv")))
    names = [r["formulation"] for r in rows]
    assert names[:2] == ["P2(M_1)", "P1(M_1)"]
    assert {"P0", "P2", "P2(M*)"} <= set(names)
    by = {r["formulation"]: r for r in rows}
    assert by["P2(M*)"]["rank"] == "2"
    v = [float(by[f"P2(M_{i})"]["value"]) for i in (1, 2, 3, 10)]
    assert all(b <= a + 1e-9 for a, b in zip(v, v[1:]))
    for i in (1, 2, 3):
        r = by[f"P2(M_{i})"]
        assert float(r["delta_eps_0"]) == float(r["delta"])
        assert float(r["gap"]) <= float(r["delta_eps_0.5"]) + 1e-9


def test_ordering_oracle_cap_marks_skipped(tmp_path):
    assert main(["ordering", "--out", str(tmp_path), "--i-list", "2", "--oracle-cap", "5"]) == EXIT_OK
    rows = {r["formulation"]: r for r in csv.DictReader(open(tmp_path / "ordering.csv"))}
    assert rows["P1(M_2)"]["status"].startswith("skipped")


def test_simulate_command(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--steps", "15", "--verify"]) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    dev = summary["max_input_deviation_from_centralized"]
    assert dev["reduced_bilevel_cascade"] <= 1e-6
    assert dev["hmpc_cascade"] > 1e-3
    for k in ("hmpc_cascade", "reduced_bilevel_cascade", "centralized"):
        assert (tmp_path / f"trace_{k}.csv").exists()


def test_simulate_zero_steps(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--steps", "0"]) == EXIT_OK
    lines = (tmp_path / "trace_centralized.csv").read_text().splitlines()
    assert lines == ["k,x0,x1,u0,stage_cost,value,status"]


def test_certify_commands(tmp_path):
    assert main(["certify", "--out", str(tmp_path), "--M", "leading:3", "--eps", "0,0.5"]) == EXIT_OK
    rec = json.loads((tmp_path / "certificate.json").read_text())["certificates"]
    assert rec[0]["issued"] and rec[1]["delta"] <= rec[0]["delta"]
    assert main(["certify", "--out", str(tmp_path), "--M", "full"]) == EXIT_OK
    rec = json.loads((tmp_path / "certificate.json").read_text())["certificates"]
    assert rec[0]["delta"] == pytest.approx(0.0, abs=1e-12)
    assert main(["certify", "--out", str(tmp_path), "--M", "hmpc"]) == EXIT_OK


def test_certify_refusal_exit_code(tmp_path):
    code = main(["certify", "--out", str(tmp_path), "--M", "hmpc", "--x0=-0.05,0.5"])
    assert code == EXIT_REFUSED
    rec = json.loads((tmp_path / "certificate.json").read_text())["certificates"][0]
    assert not rec["issued"] and rec["violations"]


def test_certify_blocking_file(tmp_path):
    M = np.kron(np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 5), np.eye(1))
    path = tmp_path / "M.json"
    path.write_text(json.dumps({"rows": 10, "cols": 2, "data": M.reshape(-1).tolist()}))
    assert main(["certify", "--out", str(tmp_path), "--M", str(path)]) == EXIT_OK
    path.write_text(json.dumps({"rows": 9, "cols": 1, "data": [1.0] * 9}))
    assert main(["certify", "--out", str(tmp_path), "--M", str(path)]) == EXIT_CONFIG


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"A": [[1, 2], [3]], "B": [[1], [1]], "N": 3}')
    assert main(["toy", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["toy", "--out", str(tmp_path), "--x0", "0,1"]) == EXIT_INFEASIBLE
    assert main(["certify", "--out", str(tmp_path), "--M", "leading:4", "--Mhat", "leading:2"]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["toy", "--out", str(tmp_path), "--x0", "-1,0"])
    assert exc.value.code == EXIT_CONFIG


def test_custom_config_file(tmp_path):
    cfg = toy_config().with_horizon(5)
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert main(["toy", "--config", str(path), "--out", str(tmp_path)]) == EXIT_OK


def test_seed_env_controls_sampling(tmp_path, monkeypatch):
    outs = []
    for seed in ("1", "1", "2"):
        monkeypatch.setenv("BMPC_SEED", seed)
        d = tmp_path / seed / str(len(outs))
        assert main(["ordering", "--out", str(d), "--i-list", "1"]) == EXIT_OK
        outs.append(json.loads((d / "ordering_solutions.json").read_text())["algorithm1"]["samples"])
    assert outs[0] == outs[1] and outs[0] != outs[2]
    monkeypatch.setenv("BMPC_SEED", "x")
    assert main(["ordering", "--out", str(tmp_path), "--i-list", "1"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bilevel_mpc", "certify", "--out", str(tmp_path), "--M", "full"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "P2(M) - P2(Mhat)" in r.stdout
