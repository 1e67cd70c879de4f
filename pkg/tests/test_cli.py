import json
import subprocess
import sys

import pytest

from drciv.cli import main, tuning_warnings
from drciv.simulate import preset


def _simulate(tmp_path, spec="dgp_x", n=600, seed=1):
    out = tmp_path / "sim"
    assert main(["simulate", "--spec", spec, "--n", str(n), "--seed", str(seed), "--out", str(out)]) == 0
    return out


def _read(out):
    return json.loads((out / "report.json").read_text())


def test_simulate_then_estimate(tmp_path, capsys):
    sim = _simulate(tmp_path)
    doc = _read(sim)
    assert doc["n"] == 600 and (sim / "data.csv").exists()
    out = tmp_path / "est"
    code = main([
        "estimate", "--data", str(sim / "data.csv"), "--outcome", "y", "--treatment", "t", "--iv", "z",
        "--covariates", "x1", "--estimand", "pi_dr,wald_x", "--bootstrap", "20", "--out", str(out),
    ])
    assert code == 0
    rep = _read(out)
    assert [r["estimand_id"] for r in rep["reports"]] == ["pi_dr", "wald_x"]
    for r in rep["reports"]:
        assert r["se_plugin"] > 0 and r["se_bootstrap"] > 0
    cfg = json.loads((out / "resolved_config.json").read_text())
    assert cfg["inference"] == "both" and cfg["bootstrap"] == 20 and cfg["grid"] == 99
    assert cfg["basis"] == {"family": "power", "J": 2, "order": 4, "knots": "quantile"}
    assert "pi_dr" in (out / "report.txt").read_text()
    assert "pi_dr" in capsys.readouterr().out


def test_resolved_config_reproduces(tmp_path):
    sim = _simulate(tmp_path, "dgp_m", 500)
    a = tmp_path / "a"
    main(["estimate", "--data", str(sim / "data.csv"), "--outcome", "y", "--treatment", "t", "--iv", "z",
          "--J", "3", "--trimming", "multiple:3", "--out", str(a)])
    cfg = json.loads((a / "resolved_config.json").read_text())
    assert cfg["trimming"] == {"rule": "multiple", "multiplier": 3.0} and cfg["basis"]["J"] == 3
    b = tmp_path / "b"
    cfg["out"] = str(b)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["estimate", "--config", str(path)]) == 0
    ra, rb = _read(a)["reports"], _read(b)["reports"]
    assert ra == rb


def test_flags_override_config(tmp_path):
    sim = _simulate(tmp_path, "constant", 400)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"data": str(sim / "data.csv"), "outcome": "y", "treatment": "t", "iv": "z",
                                "grid": 19, "level": 0.9, "estimands": ["wald"]}))
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(path), "--grid", "29", "--out", str(out)]) == 0
    cfg = json.loads((out / "resolved_config.json").read_text())
    assert cfg["grid"] == 29 and cfg["level"] == 0.9 and cfg["estimands"] == ["wald"]


def test_mc_bit_identical(tmp_path):
    spec = tmp_path / "dgp_rs.json"
    spec.write_text(preset("dgp_rs").to_json())
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["mc", "--spec", str(spec), "--n", "400", "--reps", "3", "--seed", "7",
                     "--estimand", "pi_dr,wald", "--J", "3", "--oracle", "wald=none", "--out", str(out)]) == 0
        runs.append((out / "report.json").read_bytes())
    assert runs[0] == runs[1]
    doc = json.loads(runs[0])
    assert [e["label"] for e in doc["estimators"]] == ["pi_dr", "wald"]
    assert doc["estimators"][1]["oracle"] is None


def test_constant_instrument_exit_one(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("y,t,z\n" + "".join(f"{i},{i + 0.5},1\n" for i in range(20)))
    out = tmp_path / "o"
    code = main(["estimate", "--data", str(data), "--outcome", "y", "--treatment", "t", "--iv", "z",
                 "--out", str(out)])
    assert code == 1
    assert _read(out)["error"]["kind"] == "support"


def test_estimation_error_exit_one(tmp_path):
    sim = _simulate(tmp_path, "dgp_rs", 400)
    out = tmp_path / "o"
    code = main(["estimate", "--data", str(sim / "data.csv"), "--outcome", "y", "--treatment", "t", "--iv", "z",
                 "--estimand", "wald", "--out", str(out)])
    assert code == 1
    assert _read(out)["errors"][0]["kind"] == "weak_first_stage"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["estimate"],
        ["estimate", "--data", "d.csv", "--outcome", "y", "--treatment", "t", "--iv", "z", "--grid", "1"],
        ["estimate", "--data", "d.csv", "--outcome", "y", "--treatment", "t", "--iv", "z", "--trimming", "half"],
        ["estimate", "--data", "d.csv", "--outcome", "y", "--treatment", "t", "--iv", "z", "--estimand", "late"],
        ["simulate", "--spec", "nope", "--n", "10"],
        ["mc", "--spec", "dgp_m", "--n", "100", "--reps", "1"],
    ],
)
def test_usage_errors_exit_two(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_config_key_exit_two(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"spec": "dgp_m", "n": 10, "colour": "red"}))
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_missing_column_exit_two(tmp_path):
    sim = _simulate(tmp_path, "constant", 100)
    assert main(["estimate", "--data", str(sim / "data.csv"), "--outcome", "y", "--treatment", "t", "--iv", "w",
                 "--out", str(tmp_path / "o")]) == 2


def test_tuning_warnings():
    assert tuning_warnings(100, 99, 2) == []
    assert any("grid size" in w for w in tuning_warnings(20_000, 99, 2))
    assert any("J=" in w for w in tuning_warnings(50, 99, 20))


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "drciv", "simulate", "--spec", "constant", "--n", "50",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "data.csv").exists()
