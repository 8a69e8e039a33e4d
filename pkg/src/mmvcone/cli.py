"""Command-line front end: load a config, run one experiment, write artifacts.

One experiment per invocation; composition happens in the shell.  Every run
writes a manifest capturing the fully resolved configuration, so re-running
a manifest reproduces each numeric artifact bit for bit.  Existing files
are never overwritten: colliding names get a run-index suffix.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import McSolverConfig, solve_deterministic, solve_markovian
from .cones import cone_from_config
from .errors import ConfigInvalid, InvalidBound, MmvConeError, SaddleViolated
from .market import build_model
from .simulate import (
    conservation_residual,
    constant_adversary,
    mv_objective,
    saddle_adversary,
    saddle_scan,
    scaled_minus_phi,
    simulate,
    zero_adversary,
)
from .strategies import (
    dual_curve,
    equivalence_check,
    mmv_adversary,
    mmv_feedback,
    mmv_value,
    mv_feedback,
)

EXPERIMENTS = ("solve", "value", "simulate", "saddle", "equivalence", "dual-curve")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(source) -> dict:
    """Parse and minimally validate an experiment config (path, str or dict)."""
    if isinstance(source, dict):
        cfg = dict(source)
    else:
        try:
            cfg = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"malformed JSON: {exc}", field=str(source)) from exc
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config: {exc}", field=str(source)) from exc
    cfg.pop("_meta", None)  # manifests round-trip as configs

    if "model" not in cfg or not isinstance(cfg["model"], dict):
        raise ConfigInvalid("missing object", field="model")
    if "cone" not in cfg["model"]:
        raise ConfigInvalid("missing cone description", field="model.cone")
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigInvalid(f"must be one of {EXPERIMENTS}, got {exp!r}", field="experiment")
    solver = cfg.get("solver")
    if not isinstance(solver, dict) or solver.get("kind") not in ("deterministic", "markovian"):
        raise ConfigInvalid("solver.kind must be deterministic or markovian", field="solver")
    needs_seed = (solver.get("kind") == "markovian"
                  or exp in ("simulate", "saddle"))
    if needs_seed and cfg.get("seed") is None:
        raise ConfigInvalid("seed required whenever Monte Carlo runs", field="seed")
    cfg.setdefault("output_dir", "out")
    return cfg


class _Workspace:
    """Output directory with collision-free artifact writing."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts = []

    def _unique(self, name: str) -> Path:
        p = self.root / name
        if not p.exists():
            return p
        stem, suffix = p.stem, p.suffix
        k = 1
        while (self.root / f"{stem}_{k}{suffix}").exists():
            k += 1
        return self.root / f"{stem}_{k}{suffix}"

    def write_json(self, name: str, payload: dict) -> Path:
        p = self._unique(name)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        self.artifacts.append(p.name)
        return p

    def write_csv(self, name: str, rows) -> Path:
        p = self._unique(name)
        with p.open("w") as fh:
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")
        self.artifacts.append(p.name)
        return p


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def _solve(model, cone, equation, cfg, seed_lane=0, bootstrap=None):
    solver = cfg["solver"]
    if solver["kind"] == "deterministic":
        return solve_deterministic(model, cone, equation, int(solver.get("steps", 1000)))
    mc_cfg = McSolverConfig(
        paths=int(solver["paths"]),
        basis_degree=int(solver.get("basis_degree", 2)),
        seed=int(cfg["seed"]) + seed_lane,
        steps=int(solver.get("steps", 50)),
        block_size=int(solver.get("block_size", 65536)),
        bootstrap=int(solver.get("bootstrap", 16)) if bootstrap is None else bootstrap,
    )
    return solve_markovian(model, cone, equation, mc_cfg)


def _solution_rows(sol):
    if sol.kind == "deterministic":
        yield ["t", "y"] + [f"z_{k+1}" for k in range(sol.n)]
        for i, t in enumerate(sol.grid):
            yield [float(t), float(sol.y_values[i])] + [float(z) for z in sol.z_values[i]]
    else:
        width = sol.y_values.shape[1]
        yield (["t"] + [f"y_c{b}" for b in range(width)]
               + [f"z_c{b}" for b in range(width)] + ["basis_loc", "basis_scale"])
        for i, t in enumerate(sol.grid):
            yield ([float(t)] + [float(c) for c in sol.y_values[i]]
                   + [float(c) for c in sol.z_values[i]]
                   + [float(sol.basis_loc[i]), float(sol.basis_scale[i])])


def _adversary_from_spec(spec, model, cone, y_sol):
    if spec in ("zero", "0"):
        return zero_adversary()
    if spec == "saddle":
        return saddle_adversary(mmv_adversary(y_sol, cone, model))
    if isinstance(spec, dict):
        kind = spec.get("kind")
        if kind == "zero":
            return zero_adversary()
        if kind == "saddle":
            return saddle_adversary(mmv_adversary(y_sol, cone, model))
        if kind == "scaled_minus_phi":
            return scaled_minus_phi(model, float(spec.get("c", 1.0)))
        if kind == "constant":
            return constant_adversary(spec.get("v"))
    raise ConfigInvalid(f"unknown adversary spec {spec!r}", field="adversary")


def compare_values(cfg: dict, model=None, cone=None) -> dict:
    """Independent solves of both routes; {mmv, mv, abs_diff} (+stderrs)."""
    if model is None:
        model = build_model(cfg["model"])
        cone = cone_from_config(cfg["model"]["cone"], model.m)
    y_sol = _solve(model, cone, "Y", cfg, seed_lane=0)
    p2_sol = _solve(model, cone, "P2", cfg, seed_lane=1)
    p1_sol = _solve(model, cone, "P1", cfg, seed_lane=2, bootstrap=0)
    curve = dual_curve(p1_sol.value0, p2_sol.value0, model.h0, model.x0, model.theta)
    out = {
        "mmv": mmv_value(model, y_sol),
        "mv": curve.mv_value,
        "p1_0": p1_sol.value0,
        "p2_0": p2_sol.value0,
        "y_0": y_sol.value0,
    }
    out["abs_diff"] = abs(out["mmv"] - out["mv"])
    se_y = y_sol.value0_stderr
    se_p2 = p2_sol.value0_stderr
    if se_y is not None and se_p2 is not None:
        theta, h0 = model.theta, model.h0
        se_mv = (h0 * h0 / p2_sol.value0 ** 2) * se_p2 / (2 * theta)
        out["stderr_mmv"] = se_y / (2 * theta)
        out["stderr_mv"] = se_mv
        out["combined_stderr"] = math.hypot(out["stderr_mmv"], se_mv)
    return out


def run(cfg: dict) -> int:
    """Dispatch one experiment; returns the process exit status."""
    t_start = time.time()
    ws = _Workspace(cfg.get("output_dir", "out"))
    model = build_model(cfg["model"])
    cone = cone_from_config(cfg["model"]["cone"], model.m)
    experiment = cfg["experiment"]
    results: dict = {}
    exit_code = 0

    if experiment == "solve":
        equation = cfg.get("equation", "Y")
        sol = _solve(model, cone, equation, cfg)
        name = f"{equation.lower()}_solution.csv"
        ws.write_csv(name, _solution_rows(sol))
        if sol.kind == "deterministic":
            max_abs_z = float(np.max(np.abs(sol.z_values)))
        else:
            zs = [np.abs(sol.z_at(float(t), f))
                  for t in sol.grid
                  for f in (sol.basis_loc[0], sol.basis_loc[-1])]
            max_abs_z = float(np.max(zs))
        ws.write_json(f"{equation.lower()}_solution_meta.json", {
            "equation": equation,
            "steps": len(sol.grid) - 1,
            "T": float(sol.grid[-1]),
            "kind": sol.kind,
            "seed": sol.seed,
            "clamp_events": sol.clamp_events,
            "bounds": list(sol.bounds),
            "max_abs_z": max_abs_z,  # reported, never asserted
        })
        results = {"equation": equation, "value0": sol.value0}
        if sol.value0_stderr is not None:
            results["value0_stderr"] = sol.value0_stderr

    elif experiment == "value":
        results = compare_values(cfg, model, cone)
        ws.write_json("value_comparison.json", results)

    elif experiment == "simulate":
        y_sol = _solve(model, cone, "Y", cfg)
        strat_spec = cfg.get("strategy", "mmv")
        if strat_spec in (None, "none", "zero", "0"):
            strategy = None
        elif strat_spec == "mmv":
            strategy = mmv_feedback(model, cone, y_sol)
        elif strat_spec == "mv":
            p2_sol = _solve(model, cone, "P2", cfg, seed_lane=1)
            p1_sol = _solve(model, cone, "P1", cfg, seed_lane=2, bootstrap=0)
            strategy = mv_feedback(model, cone, p1_sol, p2_sol)
        else:
            raise ConfigInvalid(f"unknown strategy {strat_spec!r}", field="strategy")
        adversary = _adversary_from_spec(cfg.get("adversary", "zero"), model, cone, y_sol)
        store = bool(cfg.get("store_paths", False))
        batch = simulate(model, strategy, adversary,
                         paths=int(cfg.get("paths", 10000)),
                         steps=int(cfg.get("steps", 200)),
                         seed=int(cfg["seed"]), store_paths=store,
                         antithetic=bool(cfg.get("antithetic", False)))
        results = {
            "objective_mean": batch.objective_mean,
            "objective_stderr": batch.objective_stderr,
            "mean_terminal_lambda": float(np.mean(batch.terminal_Lambda)),
            "mean_terminal_x": float(np.mean(batch.terminal_X)),
            "paths": batch.paths, "steps": batch.steps, "seed": batch.seed,
            "adversary": batch.adversary_kind,
        }
        if adversary.kind == "zero":
            mv_val, mv_se = mv_objective(batch, model.theta)
            results["mv_objective"] = mv_val
            results["mv_objective_stderr"] = mv_se
        if store:
            residual = conservation_residual(batch, y_sol, model)
            results["conservation_max_residual"] = residual
            ws.write_csv("trajectories.csv", _trajectory_rows(batch, y_sol, model))
        ws.write_json("simulation_summary.json", results)

    elif experiment == "saddle":
        y_sol = _solve(model, cone, "Y", cfg)
        base = mmv_feedback(model, cone, y_sol)
        pi_family = [base.scaled(c) if c != 1.0 else base
                     for c in cfg.get("pi_scales", [1.0, 0.0, 0.5, 1.5])]
        pi_family = [s if s.scale != 0.0 else None for s in pi_family]
        eta_specs = cfg.get("eta_family", [
            {"kind": "saddle"}, {"kind": "zero"},
            {"kind": "scaled_minus_phi", "c": 0.5},
            {"kind": "scaled_minus_phi", "c": 2.0},
        ])
        eta_family = [_adversary_from_spec(s, model, cone, y_sol) for s in eta_specs]
        try:
            report = saddle_scan(model, cone, y_sol, pi_family, eta_family,
                                 paths=int(cfg.get("paths", 100000)),
                                 steps=int(cfg.get("steps", 200)),
                                 seed=int(cfg["seed"]))
        except SaddleViolated as exc:
            report = exc.report
            exit_code = 2
        ws.write_csv("saddle_matrix.csv", report.csv_rows())
        results = report.summary_dict()
        ws.write_json("saddle_verdict.json", results)

    elif experiment == "equivalence":
        y_sol = _solve(model, cone, "Y", cfg, seed_lane=0)
        p2_sol = _solve(model, cone, "P2", cfg, seed_lane=1)
        p1_sol = _solve(model, cone, "P1", cfg, seed_lane=2, bootstrap=0)
        mmv = mmv_feedback(model, cone, y_sol)
        mv = mv_feedback(model, cone, p1_sol, p2_sol)
        lat = cfg.get("lattice", {})
        t_values = np.linspace(0.0, model.horizon_T, int(lat.get("t_points", 101)))
        x_values = np.linspace(float(lat.get("x_min", 0.0)),
                               float(lat.get("x_max", 2.0)),
                               int(lat.get("x_points", 101)))
        probe = (t_values, x_values)
        if lat.get("f_values") is not None:
            probe = (t_values, x_values, np.asarray(lat["f_values"], dtype=float))
        report = equivalence_check(mmv, mv, probe)
        ws.write_csv("equivalence_lattice.csv", report.csv_rows())
        results = report.summary_dict()
        ws.write_json("equivalence_summary.json", results)

    elif experiment == "dual-curve":
        p2_sol = _solve(model, cone, "P2", cfg, seed_lane=1)
        p1_sol = _solve(model, cone, "P1", cfg, seed_lane=2, bootstrap=0)
        curve = dual_curve(p1_sol.value0, p2_sol.value0, model.h0, model.x0, model.theta)
        grid_cfg = cfg.get("k_grid", {})
        anchor = model.x0 * model.h0
        span = float(grid_cfg.get("span", max(3.0 * abs(curve.K_hat - anchor), 1.0)))
        count = int(grid_cfg.get("count", 2001))
        ks = np.linspace(anchor - span, anchor + span, count)
        rows = [["K", "F", "gamma_hat_of_K", "objective"]]
        for k in ks:
            rows.append([float(k), curve.F(float(k)), curve.gamma_hat_of(float(k)),
                         curve.objective(float(k))])
        ws.write_csv("dual_curve.csv", rows)
        results = {
            "p1_0": curve.p1_0, "p2_0": curve.p2_0, "h0": curve.h0,
            "K_hat": curve.K_hat, "gamma_hat": curve.gamma_hat,
            "mv_value": curve.mv_value, "F_at_K_hat": curve.F(curve.K_hat),
        }
        ws.write_json("dual_curve_summary.json", results)

    manifest = dict(cfg)
    manifest["_meta"] = {
        "version": version_string(),
        "created_utc": dt.datetime.now(dt.timezone.utc).isoformat(),
        "elapsed_seconds": time.time() - t_start,
        "artifacts": ws.artifacts,
        "results": _jsonable(results),
    }
    ws.write_json("manifest.json", manifest)
    return exit_code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _trajectory_rows(batch, y_sol, model):
    yield ["t", "path_id", "X", "Lambda", "R"]
    theta = model.theta
    for k, t in enumerate(batch.times):
        h_t = model.discount(float(t))
        if y_sol.kind == "deterministic":
            y_t = np.full(batch.paths, y_sol.value(float(t)))
        else:
            y_t = y_sol.value_batch(float(t), batch.F_paths[:, k])
        x = batch.X_paths[:, k]
        lam = batch.Lambda_paths[:, k]
        r = x * h_t + (lam * y_t - 1.0) / (2.0 * theta)
        for p in range(batch.paths):
            yield [float(t), p, float(x[p]), float(lam[p]), float(r[p])]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmvcone",
        description="Cone-constrained MMV/MV portfolio experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="path to the experiment JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--paths", type=int, default=None, help="override path count")
        p.add_argument("--steps", type=int, default=None, help="override step count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg["experiment"] = args.command
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.paths is not None:
            cfg["paths"] = args.paths
        if args.steps is not None:
            cfg["steps"] = args.steps
        cfg = load_config(cfg)  # re-validate after overrides
        return run(cfg)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SaddleViolated, InvalidBound) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return 2
    except MmvConeError as exc:
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
