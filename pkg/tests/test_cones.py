import numpy as np
import pytest

import mmvcone as mc
from mmvcone.errors import DimensionMismatch

from conftest import random_cone, random_full_rank_sigma, sample_cone_point


def grid_search_projection(G, p, lam_max=10.0, coarse=0.05, fine=1e-3):
    """Brute-force projection onto {G lam : lam >= 0} by two-stage grid search.

    Stage one scans [0, lam_max]^k at the coarse step; stage two rescans a
    window around the winner at the fine step, matching the resolution of a
    dense fine grid without its memory cost.
    """
    G = np.asarray(G, dtype=float)
    k = G.shape[1]

    def scan(lo, hi, step):
        axes = [np.arange(lo[j], hi[j] + step / 2, step) for j in range(k)]
        mesh = np.meshgrid(*axes, indexing="ij")
        lam = np.stack([m.ravel() for m in mesh], axis=1)
        pts = lam @ G.T
        d2 = np.sum((pts - p) ** 2, axis=1)
        best = np.argmin(d2)
        return lam[best]

    best = scan(np.zeros(k), np.full(k, lam_max), coarse)
    lo = np.maximum(best - 2 * coarse, 0.0)
    hi = best + 2 * coarse
    best = scan(lo, hi, fine)
    return G @ best


def test_orthant_clips():
    cone = mc.orthant(2)
    assert mc.project_cone(cone, np.array([1.0, -2.0])) == pytest.approx([1.0, 0.0])


def test_full_space_identity():
    cone = mc.full_space(3)
    p = np.array([0.3, -1.2, 4.0])
    assert mc.project_cone(cone, p) == pytest.approx(p)


def test_generated_example_against_grid_oracle():
    G = np.array([[1.0, 1.0], [0.0, 1.0]])
    cone = mc.generated(G)
    p = np.array([-1.0, 0.5])
    proj = mc.project_cone(cone, p)
    oracle = grid_search_projection(G, p)
    assert np.linalg.norm(proj - oracle) < 2e-3
    assert proj == pytest.approx([0.0, 0.0], abs=1e-12)


def test_project_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mc.project_cone(mc.orthant(2), np.array([1.0, 2.0, 3.0]))


def test_nnls_iteration_budget():
    from mmvcone.cones import nnls
    from mmvcone.errors import NoConvergence
    rng = np.random.default_rng(4)
    A = rng.normal(size=(6, 4))
    b = rng.normal(size=6)
    with pytest.raises(NoConvergence):
        nnls(A, b, max_iter=1)


def test_transformed_full_space_remark_formula():
    # wide sigma, unconstrained: projection replaces only the Z-part
    cone = mc.full_space(1)
    sigma = np.array([[0.2, 0.0]])
    y, z = 1.0, np.array([0.1, 0.5])
    phi = np.array([0.3, 0.0])
    point = mc.project_transformed(cone, sigma, y * phi - z)
    assert point.xi == pytest.approx([0.2, 0.0], abs=1e-12)
    assert sigma.T @ point.gamma_min == pytest.approx(point.xi, abs=1e-10)


def test_transformed_orthant_negative_scalar():
    point = mc.project_transformed(mc.orthant(1), np.array([[0.2]]), np.array([-0.3]))
    assert point.xi == pytest.approx([0.0], abs=0)
    assert point.dist_sq == pytest.approx(0.09, abs=1e-15)


def test_transformed_orthant_positive_scalar():
    point = mc.project_transformed(mc.orthant(1), np.array([[0.2]]), np.array([0.3]))
    assert point.xi == pytest.approx([0.3], abs=1e-12)
    assert point.gamma_min == pytest.approx([1.5], abs=1e-10)


def test_transformed_degenerate_zero_input():
    point = mc.project_transformed(mc.orthant(2), np.eye(2), np.zeros(2))
    assert np.all(point.xi == 0.0)
    assert np.all(point.gamma_min == 0.0)
    assert point.dist_sq == 0.0


def test_inf_quadratic_examples():
    sig = np.array([[0.2]])
    assert mc.cone_inf_quadratic(mc.orthant(1), sig, np.array([0.3])) == pytest.approx(-0.09, abs=1e-12)
    assert mc.cone_inf_quadratic(mc.orthant(1), sig, np.array([-0.3])) == pytest.approx(0.0, abs=1e-15)
    assert mc.cone_inf_quadratic(mc.full_space(1), sig, np.array([0.3])) == pytest.approx(-0.09, abs=1e-12)


def test_projection_property_suite():
    rng = np.random.default_rng(2024)
    for _ in range(2000):
        m = int(rng.integers(1, 5))
        cone = random_cone(rng, m)
        p = rng.normal(size=m) * rng.choice([0.5, 1.0, 5.0])
        q = rng.normal(size=m)
        proj_p = mc.project_cone(cone, p)
        proj_q = mc.project_cone(cone, q)
        # idempotence
        assert np.linalg.norm(mc.project_cone(cone, proj_p) - proj_p) < 1e-12
        # nonexpansiveness
        assert (np.linalg.norm(proj_p - proj_q)
                <= np.linalg.norm(p - q) + 1e-12)
        # positive homogeneity
        alpha = float(rng.uniform(0.0, 3.0))
        assert np.linalg.norm(mc.project_cone(cone, alpha * p) - alpha * proj_p) < 1e-10
        # membership of the projection
        assert mc.contains(cone, proj_p, tol=1e-8)


def test_moreau_and_variational_inequality():
    rng = np.random.default_rng(77)
    for _ in range(400):
        m = int(rng.integers(1, 4))
        n = int(rng.integers(m, 5))
        cone = random_cone(rng, m)
        sigma = random_full_rank_sigma(rng, m, n)
        a = rng.normal(size=n)
        point = mc.project_transformed(cone, sigma, a)
        # representative maps back onto the projection
        assert np.linalg.norm(sigma.T @ point.gamma_min - point.xi) < 1e-10
        # Moreau orthogonality
        assert abs(point.xi @ (a - point.xi)) < 1e-10
        # variational inequality against random members of sigma' Gamma
        for _ in range(5):
            u = sigma.T @ sample_cone_point(rng, cone)
            assert (a - point.xi) @ (u - point.xi) <= 1e-10
        # distance-form identity for the quadratic infimum
        val = mc.cone_inf_quadratic(cone, sigma, a)
        assert val <= 0.0
        assert abs(val - (point.dist_sq - a @ a)) < 1e-10
        # direct evaluation at the minimizer agrees
        g = point.gamma_min
        direct = g @ (sigma @ sigma.T) @ g - 2.0 * g @ (sigma @ a)
        assert abs(val - direct) < 1e-9


def test_generated_projection_matches_grid_oracle_randomized():
    rng = np.random.default_rng(4321)
    for _ in range(30):
        m = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        G = rng.normal(size=(m, k))
        cone = mc.generated(G)
        p = rng.normal(size=m)
        proj = mc.project_cone(cone, p)
        oracle = grid_search_projection(G, p, lam_max=6.0)
        assert np.linalg.norm(proj - oracle) < 2e-3


def test_batch_projection_matches_scalar():
    rng = np.random.default_rng(5)
    for kind in ("full", "orthant", "generated"):
        m, n = 2, 3
        cone = {"full": mc.full_space(m), "orthant": mc.orthant(m),
                "generated": mc.generated(rng.normal(size=(m, 3)))}[kind]
        sigma = random_full_rank_sigma(rng, m, n)
        A = rng.normal(size=(40, n))
        xi_b, gamma_b, dist_b = mc.cones.project_transformed_batch(cone, sigma, A)
        for i in range(40):
            point = mc.project_transformed(cone, sigma, A[i])
            assert np.linalg.norm(xi_b[i] - point.xi) < 1e-9
            assert abs(dist_b[i] - point.dist_sq) < 1e-9


def test_ill_conditioned_generators_still_near_idempotent():
    rng = np.random.default_rng(99)
    for _ in range(200):
        m = int(rng.integers(2, 5))
        k = int(rng.integers(2, 5))
        G = rng.normal(size=(m, k))
        G[:, -1] = G[:, 0] + 1e-4 * rng.normal(size=m)  # nearly dependent columns
        cone = mc.generated(G)
        p = rng.normal(size=m) * 5.0
        proj = mc.project_cone(cone, p)
        again = mc.project_cone(cone, proj)
        assert np.linalg.norm(again - proj) < 1e-9


def test_cone_from_config():
    assert mc.cone_from_config({"kind": "full"}, 2).kind == "full"
    assert mc.cone_from_config({"kind": "orthant"}, 2).kind == "orthant"
    g = mc.cone_from_config({"kind": "generated", "G": [[1.0, 0.0], [0.0, 1.0]]}, 2)
    assert g.generators.shape == (2, 2)
