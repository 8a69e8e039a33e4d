import math

import numpy as np
import pytest

import mmvcone as mc
from mmvcone.errors import (
    AdversaryNotZero,
    ConfigInvalid,
    MissingTrajectories,
    SaddleViolated,
)

from conftest import H0_A, VALUE_A


@pytest.fixture(scope="module")
def mmv_a(model_a, cone_a, ysol_a):
    return mc.mmv_feedback(model_a, cone_a, ysol_a)


@pytest.fixture(scope="module")
def saddle_a(model_a, cone_a, ysol_a):
    return mc.saddle_adversary(mc.mmv_adversary(ysol_a, cone_a, model_a))


def test_riskless_drift_exact(model_a):
    res = mc.simulate(model_a, None, mc.zero_adversary(), paths=200, steps=20, seed=1)
    assert np.all(res.terminal_X == res.terminal_X[0])
    assert res.terminal_X[0] == pytest.approx(math.exp(0.02), abs=1e-15)
    assert np.all(res.terminal_Lambda == 1.0)
    assert res.objective_mean == pytest.approx(math.exp(0.02), abs=1e-14)


def test_zero_adversary_unit_density(model_a, mmv_a):
    res = mc.simulate(model_a, mmv_a, mc.zero_adversary(), paths=500, steps=20, seed=2)
    assert np.all(res.terminal_Lambda == 1.0)
    # objective reduces to the sample mean of X_T
    assert res.objective_mean == pytest.approx(float(np.mean(res.terminal_X)), abs=1e-14)


def test_lambda_positive_and_martingale(model_a, mmv_a, saddle_a):
    for adv in (saddle_a, mc.scaled_minus_phi(model_a, 0.5),
                mc.scaled_minus_phi(model_a, 2.0),
                mc.constant_adversary([0.25])):
        res = mc.simulate(model_a, mmv_a, adv, paths=20000, steps=50, seed=3)
        assert np.all(res.terminal_Lambda > 0.0)
        se = float(np.std(res.terminal_Lambda, ddof=1)) / math.sqrt(res.paths)
        assert abs(float(np.mean(res.terminal_Lambda)) - 1.0) <= 3.0 * se


def test_saddle_cell_hits_value(model_a, mmv_a, saddle_a, ysol_a):
    res = mc.simulate(model_a, mmv_a, saddle_a, paths=100000, steps=200, seed=7)
    r0 = mc.mmv_value(model_a, ysol_a)
    assert abs(res.objective_mean - r0) <= 3.0 * res.objective_stderr


def test_eta_hat_path_constant_minus_phi(model_a, saddle_a):
    # full space, m = n: the worst-case loading is -sigma^{-1} mu everywhere
    rng = np.random.default_rng(0)
    for t in rng.uniform(0.0, 1.0, size=20):
        eta = saddle_a.eta_batch(model_a, float(t), np.zeros(8))
        assert np.max(np.abs(eta - (-0.3))) < 1e-13


def test_simulation_reproducible(model_a, mmv_a, saddle_a):
    a = mc.simulate(model_a, mmv_a, saddle_a, paths=3000, steps=30, seed=11)
    b = mc.simulate(model_a, mmv_a, saddle_a, paths=3000, steps=30, seed=11)
    assert np.array_equal(a.terminal_X, b.terminal_X)
    assert np.array_equal(a.terminal_Lambda, b.terminal_Lambda)
    assert a.objective_mean == b.objective_mean


def test_reproducible_across_worker_counts(model_a, mmv_a, saddle_a):
    a = mc.simulate(model_a, mmv_a, saddle_a, paths=4000, steps=20, seed=13,
                    block_size=1000, workers=1)
    b = mc.simulate(model_a, mmv_a, saddle_a, paths=4000, steps=20, seed=13,
                    block_size=1000, workers=4)
    assert np.array_equal(a.terminal_X, b.terminal_X)
    assert np.array_equal(a.terminal_Lambda, b.terminal_Lambda)


def test_antithetic_keeps_mean(model_a, mmv_a, saddle_a):
    plain = mc.simulate(model_a, mmv_a, saddle_a, paths=40000, steps=50, seed=17)
    anti = mc.simulate(model_a, mmv_a, saddle_a, paths=40000, steps=50, seed=17,
                       antithetic=True)
    tol = 3.0 * (plain.objective_stderr + anti.objective_stderr)
    assert abs(plain.objective_mean - anti.objective_mean) <= tol


def test_simulate_input_validation(model_a, mmv_a):
    with pytest.raises(ConfigInvalid):
        mc.simulate(model_a, mmv_a, mc.zero_adversary(), paths=10, steps=20, seed=1)
    with pytest.raises(ConfigInvalid):
        mc.simulate(model_a, mmv_a, mc.zero_adversary(), paths=200, steps=5, seed=1)


def test_conservation_residual_requires_paths(model_a, mmv_a, saddle_a, ysol_a):
    res = mc.simulate(model_a, mmv_a, saddle_a, paths=200, steps=20, seed=5)
    with pytest.raises(MissingTrajectories):
        mc.conservation_residual(res, ysol_a, model_a)


def test_conservation_initial_time_exact(model_a, mmv_a, saddle_a, ysol_a):
    res = mc.simulate(model_a, mmv_a, saddle_a, paths=300, steps=20, seed=5,
                      store_paths=True)
    theta = model_a.theta
    const = theta * model_a.h0 * model_a.x0 + ysol_a.value0
    at0 = theta * model_a.h0 * res.X_paths[:, 0] + ysol_a.value0 * res.Lambda_paths[:, 0]
    assert np.max(np.abs(at0 - const)) == 0.0
    assert const == pytest.approx(H0_A + math.exp(0.09), abs=1e-8)


def test_conservation_instance_b_exact(model_b, cone_b, ysol_b):
    mmv = mc.mmv_feedback(model_b, cone_b, ysol_b)
    adv = mc.saddle_adversary(mc.mmv_adversary(ysol_b, cone_b, model_b))
    res = mc.simulate(model_b, mmv, adv, paths=500, steps=40, seed=9, store_paths=True)
    residual = mc.conservation_residual(res, ysol_b, model_b)
    assert residual < 1e-12


def test_conservation_shrinks_with_steps(model_a, mmv_a, saddle_a, ysol_a):
    residuals = []
    for steps in (50, 100, 200):
        res = mc.simulate(model_a, mmv_a, saddle_a, paths=2000, steps=steps,
                          seed=23, store_paths=True)
        residuals.append(mc.conservation_residual(res, ysol_a, model_a))
    assert residuals[2] < residuals[1] < residuals[0]


def test_mv_objective_requires_zero_adversary(model_a, mmv_a, saddle_a):
    res = mc.simulate(model_a, mmv_a, saddle_a, paths=200, steps=20, seed=4)
    with pytest.raises(AdversaryNotZero):
        mc.mv_objective(res, model_a.theta)


def test_mv_objective_riskless(model_a):
    res = mc.simulate(model_a, None, mc.zero_adversary(), paths=200, steps=20, seed=4)
    value, stderr = mc.mv_objective(res, model_a.theta)
    assert value == pytest.approx(math.exp(0.02), abs=1e-14)
    assert stderr == 0.0


def test_mv_objective_instance_b(model_b, cone_b):
    p1 = mc.solve_deterministic(model_b, cone_b, "P1", 500)
    p2 = mc.solve_deterministic(model_b, cone_b, "P2", 500)
    mv = mc.mv_feedback(model_b, cone_b, p1, p2)
    res = mc.simulate(model_b, mv, mc.zero_adversary(), paths=300, steps=20, seed=6)
    value, _ = mc.mv_objective(res, model_b.theta)
    assert value == pytest.approx(H0_A, abs=1e-12)


def test_mv_objective_instance_a(model_a, cone_a, p1sol_a, p2sol_a):
    mv = mc.mv_feedback(model_a, cone_a, p1sol_a, p2sol_a)
    res = mc.simulate(model_a, mv, mc.zero_adversary(), paths=100000, steps=200, seed=29)
    value, stderr = mc.mv_objective(res, model_a.theta)
    assert abs(value - VALUE_A) <= 3.0 * stderr


def test_saddle_scan_passes(model_a, cone_a, ysol_a, mmv_a, saddle_a):
    pi_family = [mmv_a, None, mmv_a.scaled(0.5), mmv_a.scaled(1.5)]
    eta_family = [saddle_a, mc.zero_adversary(),
                  mc.scaled_minus_phi(model_a, 0.5), mc.scaled_minus_phi(model_a, 2.0)]
    report = mc.saddle_scan(model_a, cone_a, ysol_a, pi_family, eta_family,
                            paths=20000, steps=50, seed=31)
    assert report.passed
    assert abs(report.r0 - VALUE_A) < 1e-8
    # reproducibility of the whole scan
    again = mc.saddle_scan(model_a, cone_a, ysol_a, pi_family, eta_family,
                           paths=20000, steps=50, seed=31)
    assert np.array_equal(report.means, again.means)


def test_saddle_scan_requires_saddle_pair(model_a, cone_a, ysol_a, mmv_a):
    with pytest.raises(ConfigInvalid):
        mc.saddle_scan(model_a, cone_a, ysol_a, [mmv_a], [mc.zero_adversary()],
                       paths=200, steps=20, seed=1)


def test_saddle_scan_detects_wrong_value(model_a, cone_a, ysol_a, mmv_a, saddle_a):
    # corrupt the claimed optimal value: the scan must flag the saddle cell
    wrong = mc.BsdeSolution(equation="Y", grid=ysol_a.grid,
                            y_values=ysol_a.y_values * 1.2,
                            z_values=ysol_a.z_values, bounds=ysol_a.bounds, n=1)
    with pytest.raises(SaddleViolated) as exc_info:
        mc.saddle_scan(model_a, cone_a, wrong, [mmv_a], [saddle_a],
                       paths=20000, steps=50, seed=37)
    assert exc_info.value.report.violations


def test_custom_adversary_requires_and_enforces_bound(model_a, mmv_a):
    with pytest.raises(ConfigInvalid):
        mc.custom_adversary(lambda t, f: np.zeros((len(f), 1)), bound=0.0)
    # a loading exceeding its declared bound gets clipped onto the ball
    adv = mc.custom_adversary(lambda t, f: np.full((len(f), 1), -0.9), bound=0.3)
    eta = adv.eta_batch(model_a, 0.5, np.zeros(4))
    assert np.allclose(np.linalg.norm(eta, axis=1), 0.3)
    res = mc.simulate(model_a, mmv_a, adv, paths=5000, steps=20, seed=8)
    assert np.all(res.terminal_Lambda > 0)
    se = float(np.std(res.terminal_Lambda, ddof=1)) / math.sqrt(res.paths)
    assert abs(float(np.mean(res.terminal_Lambda)) - 1.0) <= 3.0 * se


def test_exploded_path_detected(model_a, mmv_a):
    from mmvcone.errors import ExplodedPath
    with pytest.raises(ExplodedPath), np.errstate(over="ignore", invalid="ignore"):
        mc.simulate(model_a, mmv_a.scaled(1e150), mc.zero_adversary(),
                    paths=100, steps=10, seed=3)


def test_markov_simulation_runs(model_c):
    cone = mc.full_space(1)
    sol = mc.solve_markovian(model_c, cone, "Y",
                             mc.McSolverConfig(paths=5000, basis_degree=2,
                                               seed=41, steps=25, bootstrap=0))
    mmv = mc.mmv_feedback(model_c, cone, sol)
    adv = mc.saddle_adversary(mc.mmv_adversary(sol, cone, model_c))
    res = mc.simulate(model_c, mmv, adv, paths=2000, steps=25, seed=43,
                      store_paths=True)
    assert np.all(np.isfinite(res.terminal_X))
    assert np.all(res.terminal_Lambda > 0)
    assert res.F_paths is not None
    resid = mc.conservation_residual(res, sol, model_c)
    assert math.isfinite(resid)
