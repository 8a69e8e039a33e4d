import math

import numpy as np
import pytest

import mmvcone as mc

# Instance A: one asset, constant coefficients, unconstrained
INSTANCE_A = {
    "m": 1, "n": 1, "T": 1.0, "x0": 1.0, "theta": 1.0, "rate": 0.02,
    "coefficients": {"kind": "deterministic", "mu": [0.06], "sigma": [[0.2]]},
    "delta": 1e-6,
    "cone": {"kind": "full"},
}

# Instance B: orthant cone with negative excess return (no-trade)
INSTANCE_B = {
    "m": 1, "n": 1, "T": 1.0, "x0": 1.0, "theta": 1.0, "rate": 0.02,
    "coefficients": {"kind": "deterministic", "mu": [-0.06], "sigma": [[0.2]]},
    "delta": 1e-6,
    "cone": {"kind": "orthant"},
}

# Instance C: mean-reverting factor drives the excess return, incomplete market
INSTANCE_C = {
    "m": 1, "n": 2, "T": 1.0, "x0": 1.0, "theta": 1.0, "rate": 0.02,
    "coefficients": {"kind": "markov", "kappa": 1.0, "mean": 0.06, "nu": 0.03,
                     "f0": 0.06, "mu0": [0.0], "mu1": [1.0],
                     "sigma0": [[0.2, 0.0]], "driving_index": 1},
    "delta": 1e-6,
    "cone": {"kind": "full"},
}

Y0_A = math.exp(0.09)
P2_0_A = math.exp(-0.05)
H0_A = math.exp(0.02)
VALUE_A = H0_A + (Y0_A - 1.0) / 2.0


@pytest.fixture(scope="session")
def model_a():
    return mc.build_model(INSTANCE_A)


@pytest.fixture(scope="session")
def cone_a():
    return mc.full_space(1)


@pytest.fixture(scope="session")
def ysol_a(model_a, cone_a):
    return mc.solve_deterministic(model_a, cone_a, "Y", 1000)


@pytest.fixture(scope="session")
def p1sol_a(model_a, cone_a):
    return mc.solve_deterministic(model_a, cone_a, "P1", 1000)


@pytest.fixture(scope="session")
def p2sol_a(model_a, cone_a):
    return mc.solve_deterministic(model_a, cone_a, "P2", 1000)


@pytest.fixture(scope="session")
def model_b():
    return mc.build_model(INSTANCE_B)


@pytest.fixture(scope="session")
def cone_b():
    return mc.orthant(1)


@pytest.fixture(scope="session")
def ysol_b(model_b, cone_b):
    return mc.solve_deterministic(model_b, cone_b, "Y", 1000)


@pytest.fixture(scope="session")
def model_c():
    return mc.build_model(INSTANCE_C)


def random_full_rank_sigma(rng, m, n, min_sv=0.15):
    """Random (m, n) volatility with smallest singular value bounded away from 0."""
    while True:
        sig = rng.normal(size=(m, n))
        if np.linalg.svd(sig, compute_uv=False)[-1] >= min_sv:
            return sig


def random_cone(rng, m, max_cond=25.0):
    """Random cone; generated kinds use condition-bounded generator matrices.

    Fixed-point tolerances at the 1e-12 level are only attainable in float64
    when the generators are reasonably conditioned; ill-conditioned cones are
    exercised separately at a looser tolerance.
    """
    kind = rng.integers(0, 3)
    if kind == 0:
        return mc.full_space(m)
    if kind == 1:
        return mc.orthant(m)
    k = int(rng.integers(1, 4))
    while True:
        G = rng.normal(size=(m, k))
        sv = np.linalg.svd(G, compute_uv=False)
        if sv[0] / sv[-1] <= max_cond:
            return mc.generated(G)


def sample_cone_point(rng, cone):
    """A random element of the cone (for membership/variational probes)."""
    if cone.kind == "full":
        return rng.normal(size=cone.dim)
    if cone.kind == "orthant":
        return np.abs(rng.normal(size=cone.dim))
    lam = np.abs(rng.normal(size=cone.generators.shape[1]))
    return cone.generators @ lam
