import json
import math

import pytest

from mmvcone import cli

from conftest import INSTANCE_A, INSTANCE_C


def _write_config(tmp_path, payload, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(payload, indent=2))
    return p


def _base_config(tmp_path, experiment, **extra):
    cfg = {
        "model": {k: (dict(v) if isinstance(v, dict) else v) for k, v in INSTANCE_A.items()},
        "solver": {"kind": "deterministic", "steps": 1000},
        "experiment": experiment,
        "seed": 20260808,
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(extra)
    return cfg


def test_solve_writes_solution_and_manifest(tmp_path):
    cfg = _base_config(tmp_path, "solve")
    assert cli.run(cli.load_config(cfg)) == 0
    out = tmp_path / "out"
    assert (out / "y_solution.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert abs(manifest["_meta"]["results"]["value0"] - math.exp(0.09)) < 1e-8
    header = (out / "y_solution.csv").read_text().splitlines()[0]
    assert header == "t,y,z_1"


def test_value_comparison(tmp_path):
    cfg = _base_config(tmp_path, "value")
    assert cli.run(cli.load_config(cfg)) == 0
    payload = json.loads((tmp_path / "out" / "value_comparison.json").read_text())
    assert payload["abs_diff"] <= 1e-8
    assert abs(payload["mmv"] - 1.0672884818793609) < 1e-8


def test_equivalence_artifacts(tmp_path):
    cfg = _base_config(tmp_path, "equivalence",
                       lattice={"t_points": 11, "x_points": 11, "x_min": 0.0, "x_max": 2.0})
    assert cli.run(cli.load_config(cfg)) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "equivalence_summary.json").read_text())
    assert summary["max_gap"] <= 1e-8
    assert summary["value_gap"] <= 1e-8
    lattice = (out / "equivalence_lattice.csv").read_text().splitlines()
    assert lattice[0] == "t,X,f,pi_mmv_1,pi_mv_1,abs_gap"
    assert len(lattice) == 1 + 11 * 11


def test_simulate_summary(tmp_path):
    cfg = _base_config(tmp_path, "simulate", paths=2000, steps=50,
                       strategy="mmv", adversary="saddle", store_paths=True)
    assert cli.run(cli.load_config(cfg)) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "simulation_summary.json").read_text())
    assert summary["paths"] == 2000
    assert "conservation_max_residual" in summary
    rows = (out / "trajectories.csv").read_text().splitlines()
    assert rows[0] == "t,path_id,X,Lambda,R"
    assert len(rows) == 1 + 2000 * 51


def test_saddle_experiment(tmp_path):
    cfg = _base_config(tmp_path, "saddle", paths=5000, steps=20)
    assert cli.run(cli.load_config(cfg)) == 0
    verdict = json.loads((tmp_path / "out" / "saddle_verdict.json").read_text())
    assert verdict["passed"] is True
    assert (tmp_path / "out" / "saddle_matrix.csv").exists()


def test_dual_curve_experiment(tmp_path):
    cfg = _base_config(tmp_path, "dual-curve", k_grid={"count": 101, "span": 0.5})
    assert cli.run(cli.load_config(cfg)) == 0
    summary = json.loads((tmp_path / "out" / "dual_curve_summary.json").read_text())
    assert abs(summary["mv_value"] - 1.0672884818793609) < 1e-8
    rows = (tmp_path / "out" / "dual_curve.csv").read_text().splitlines()
    assert rows[0] == "K,F,gamma_hat_of_K,objective"
    assert len(rows) == 102


def test_malformed_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{не json")
    rc = cli.main(["solve", "--config", str(bad)])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_missing_field_named(tmp_path, capsys):
    cfg = _base_config(tmp_path, "solve")
    del cfg["model"]["coefficients"]
    path = _write_config(tmp_path, cfg)
    rc = cli.main(["solve", "--config", str(path)])
    assert rc == 1
    assert "coefficients" in capsys.readouterr().err


def test_seed_required_for_monte_carlo(tmp_path):
    cfg = _base_config(tmp_path, "saddle")
    del cfg["seed"]
    with pytest.raises(cli.ConfigInvalid):
        cli.load_config(cfg)


def test_main_with_overrides(tmp_path):
    cfg = _base_config(tmp_path, "solve")
    path = _write_config(tmp_path, cfg)
    out2 = tmp_path / "other"
    rc = cli.main(["solve", "--config", str(path), "--out", str(out2), "--seed", "99"])
    assert rc == 0
    manifest = json.loads((out2 / "manifest.json").read_text())
    assert manifest["seed"] == 99


def test_never_overwrites(tmp_path):
    cfg = _base_config(tmp_path, "solve")
    assert cli.run(cli.load_config(cfg)) == 0
    assert cli.run(cli.load_config(cfg)) == 0
    out = tmp_path / "out"
    assert (out / "y_solution.csv").exists()
    assert (out / "y_solution_1.csv").exists()
    assert (out / "manifest.json").exists()
    assert (out / "manifest_1.json").exists()


def test_manifest_round_trip_bitwise(tmp_path):
    cfg = _base_config(tmp_path, "value", output_dir=str(tmp_path / "run1"))
    assert cli.run(cli.load_config(cfg)) == 0
    manifest_path = tmp_path / "run1" / "manifest.json"
    manifest = cli.load_config(manifest_path)   # a manifest is a valid config
    manifest["output_dir"] = str(tmp_path / "run2")
    assert cli.run(cli.load_config(manifest)) == 0
    first = (tmp_path / "run1" / "value_comparison.json").read_bytes()
    second = (tmp_path / "run2" / "value_comparison.json").read_bytes()
    assert first == second


def test_markovian_value_cli(tmp_path):
    cfg = {
        "model": {k: (dict(v) if isinstance(v, dict) else v) for k, v in INSTANCE_C.items()},
        "solver": {"kind": "markovian", "paths": 4000, "basis_degree": 2,
                   "steps": 20, "bootstrap": 4},
        "experiment": "value",
        "seed": 7,
        "output_dir": str(tmp_path / "out"),
    }
    assert cli.run(cli.load_config(cfg)) == 0
    payload = json.loads((tmp_path / "out" / "value_comparison.json").read_text())
    assert payload["abs_diff"] <= 3.0 * payload["combined_stderr"]
