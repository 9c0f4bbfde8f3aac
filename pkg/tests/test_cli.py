import csv
import json

import numpy as np
import pytest

from fdbsde.cli import main

from conftest import raw_scenario


def _write(tmp_path, raw, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_ok(capsys):
    assert main(["validate", "--scenario", "flat"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["failed"] == []
    assert report["ledger"]["K_Y"] == pytest.approx(1.0)  # max(1, K_alpha^2 / 2) / gamma
    assert report["ledger"]["K_Z"] == [0.0, 0.0]


def test_validate_fails_dissipativity(tmp_path, capsys):
    raw = raw_scenario("flat")
    raw["C_g"] = 2.0
    assert main(["validate", "--scenario", _write(tmp_path, raw)]) == 1
    assert "FAIL check_dissipativity" in capsys.readouterr().err


def test_validate_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["validate", "--scenario", str(p)]) == 2


def test_validate_invalid_gamma(tmp_path):
    raw = raw_scenario("flat")
    raw["gamma"] = 0.0  # parses, but is semantically invalid
    assert main(["validate", "--scenario", _write(tmp_path, raw)]) == 1


def test_missing_out_is_usage_error():
    assert main(["solve", "--scenario", "flat"]) == 2


def test_solve_writes_fields_and_manifest(tmp_path):
    out = tmp_path / "run"
    assert main(["solve", "--scenario", "flat", "--out", str(out)]) == 0
    fields = np.genfromtxt(out / "fields.csv", delimiter=",", names=True)
    assert np.max(np.abs(fields["y1"] + 0.05)) <= 1e-4
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "solve" and man["scenario_hash"]
    assert {"fields.csv", "bounds.csv"} <= {a.split("/")[-1] for a in man["artifacts"]}
    assert all(r["pass"] in ("True", "skipped") for r in _rows(out / "bounds.csv"))


def test_solve_rho_override(tmp_path):
    assert main(["solve", "--scenario", "flat", "--rho", "0.2", "--out", str(tmp_path)]) == 0
    fields = np.genfromtxt(tmp_path / "fields.csv", delimiter=",", names=True)
    assert np.max(np.abs(fields["y1"] + 0.025)) <= 1e-6


def test_ergodic_command(tmp_path):
    assert main(["ergodic", "--scenario", "flat", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["result"]["varrho"] == pytest.approx(-0.005, abs=1e-6)
    assert len(_rows(tmp_path / "ladder.csv")) >= 2


def test_ergodic_assumption_gate(tmp_path):
    assert main(["ergodic", "--scenario", "curved", "--out", str(tmp_path)]) == 1


def test_verify_bounds(tmp_path, capsys):
    assert main(["verify", "--scenario", "curved", "--suite", "bounds", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bounds.csv").exists()


def test_verify_martingale_small(tmp_path):
    args = ["verify", "--scenario", "flat", "--suite", "martingale", "--paths", "2000", "--dt", "0.01",
            "--checkpoints", "0.5,1", "--out", str(tmp_path), "--seed", "3"]
    assert main(args) == 0
    rows = _rows(tmp_path / "martingale.csv")
    assert len(rows) == 3 * 2 * 2
    assert all(r["pass"] == "True" for r in rows)
    zero = [r for r in rows if r["strategy"] == "zero"]
    assert all(r["deterministic"] == "True" for r in zero)


def test_verify_byte_identical_across_threads(tmp_path, monkeypatch):
    base = ["verify", "--scenario", "curved", "--suite", "martingale", "--paths", "600", "--dt", "0.02",
            "--checkpoints", "0.5", "--strategies", "optimal", "--seed", "11"]
    assert main(base + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    monkeypatch.setenv("FDB_THREADS", "3")
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "martingale.csv").read_bytes()
    b = (tmp_path / "b" / "martingale.csv").read_bytes()
    assert a == b
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["flags"]["threads"] == 3


def test_verify_decomposition_small(tmp_path):
    args = ["verify", "--scenario", "flat", "--suite", "decomposition", "--paths", "4000", "--dt", "0.01",
            "--checkpoints", "1", "--out", str(tmp_path)]
    assert main(args) == 0
    assert len(_rows(tmp_path / "decomposition.csv")) == 2


def test_simulate_outputs(tmp_path):
    args = ["simulate", "--scenario", "curved", "--paths", "200", "--horizon", "1", "--dt", "0.01",
            "--records", "10", "--out", str(tmp_path)]
    assert main(args) == 0
    paths = _rows(tmp_path / "paths.csv")
    assert len(paths) == 200 and "T1" in paths[0]
    wealth = _rows(tmp_path / "wealth.csv")
    assert float(wealth[0]["t"]) == 0.0 and float(wealth[-1]["t"]) == 1.0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["result"]["wealth_jump_error"] <= 1e-15


def test_simulate_unknown_strategy(tmp_path):
    assert main(["simulate", "--scenario", "flat", "--strategy", "bogus", "--paths", "5", "--out",
                 str(tmp_path)]) == 1


def test_verify_bounds_skipped_without_assumption(tmp_path, capsys):
    raw = raw_scenario("curved")
    raw["C_g"] = 0.5  # below C_phi = 0.62
    code = main(["verify", "--scenario", _write(tmp_path, raw), "--suite", "bounds", "--out", str(tmp_path / "o")])
    assert code == 0
    assert "skipped: assumption" in capsys.readouterr().out
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["result"]["status"] == "skipped: assumption"
