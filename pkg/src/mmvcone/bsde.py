"""Backward-equation engine.

Four scalar backward SDEs are solved on a time grid, all sharing one driver
kernel (the cone-constrained quadratic infimum):

  Y   : dY = [ (1/Y) inf_{pi}(pi'ss'pi - 2 pi's(phi Y - Z)) + |Z|^2/Y ] dt + Z'dW,  Y_T = 1
  P   : dP = -inf_{pi}[P pi'ss'pi - 2 pi'(P mu + s Delta)] dt + Delta'dW,           P_T = 1
  P1  : dP1 = -{2 r P1 + inf_{pi}[P1 pi'ss'pi + 2 pi'(P1 mu + s Delta1)]} dt + ...
  P2  : dP2 = -{2 r P2 + inf_{pi}[P2 pi'ss'pi - 2 pi'(P2 mu + s Delta2)]} dt + ...

With deterministic coefficients the martingale part vanishes and each
equation reduces to an ODE integrated backward by classical RK4.  With
Markov-factor coefficients the pair is estimated by least-squares Monte
Carlo: simulate the factor forward, then walk backward regressing the
continuation value and the martingale increment on a polynomial basis,
closing each step with an implicit Euler solve of the driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .cones import Cone, cone_inf_quadratic_batch, project_transformed
from .errors import (
    ConfigInvalid,
    InvalidBound,
    NonPositiveY,
    PositivityLost,
    RegressionIllConditioned,
)
from .market import DiscountFactor, MarketModel, pricing_kernel_batch
from .rng import substream

EQUATIONS = ("Y", "P", "P1", "P2")

_CLAMP_BUDGET = 1e-3          # fraction of path-steps allowed to hit the envelope
_FIXED_POINT_TOL = 1e-12
_FIXED_POINT_MAX = 60
_BOUND_SLACK = 1e-10          # slack for the P_{i,0} <= h_0^2 comparison


@dataclass(frozen=True)
class McSolverConfig:
    """Regression Monte Carlo settings."""

    paths: int
    basis_degree: int
    seed: int
    steps: int
    block_size: int = 65536
    bootstrap: int = 16       # replicate solves used for the stderr estimate

    def __post_init__(self):
        if self.paths < 1000:
            raise ConfigInvalid("paths must be >= 1000", field="solver.paths")
        if not 0 <= self.basis_degree <= 6:
            raise ConfigInvalid("basis_degree must lie in [0, 6]", field="solver.basis_degree")
        if self.steps < 10:
            raise ConfigInvalid("steps must be >= 10", field="solver.steps")
        if self.block_size < 1:
            raise ConfigInvalid("block_size must be positive", field="solver.block_size")
        if self.bootstrap < 0:
            raise ConfigInvalid("bootstrap must be >= 0", field="solver.bootstrap")


def driver_f(cone: Cone, sigma, phi, y: float, z) -> float:
    """Driver of the Y equation at one point, projection form.

    f = -(1/y)|z + xi|^2 + 2 phi' xi  with  xi = Proj_{sigma' Gamma}(y phi - z).
    """
    if y <= 0:
        raise NonPositiveY(f"driver evaluated at y={y}")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    point = project_transformed(cone, sigma, y * phi - z)
    zx = z + point.xi
    return float(-(zx @ zx) / y + 2.0 * (phi @ point.xi))


def _driver_batch(equation, cone, sigma, phi, r_t, y, z):
    """Vectorized driver f with the convention d(value) = -f dt + Z'dW.

    sigma: (m, n) shared or (N, m, n); phi: (n,) or (N, n); y: (N,);
    z: (N, n).  Values y must be positive (callers clip to the envelope
    before evaluating).
    """
    y = np.asarray(y, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = np.broadcast_to(phi, (y.shape[0], phi.shape[0]))
    if equation == "Y":
        a = phi * y[:, None] - z
        infq = cone_inf_quadratic_batch(cone, sigma, a)
        return -(infq + np.einsum("ij,ij->i", z, z)) / y
    if equation == "P":
        a = phi + z / y[:, None]
        return y * cone_inf_quadratic_batch(cone, sigma, a)
    if equation == "P1":
        a = -(phi + z / y[:, None])
        return 2.0 * r_t * y + y * cone_inf_quadratic_batch(cone, sigma, a)
    if equation == "P2":
        a = phi + z / y[:, None]
        return 2.0 * r_t * y + y * cone_inf_quadratic_batch(cone, sigma, a)
    raise ConfigInvalid(f"unknown equation {equation!r}", field="equation")


def positivity_envelope(model: MarketModel, grid: np.ndarray) -> tuple[float, float]:
    """(lower, upper) = exp(-/+ C T) with C = max over probes of |2r| + |phi|^2."""
    quantile_levels = np.linspace(0.005, 0.995, 21)
    c = 0.0
    for t in grid:
        t = float(t)
        if model.coefficients.kind == "markov":
            fvals = model.coefficients.factor_quantiles(t, quantile_levels)
        else:
            fvals = np.array([0.0])
        phis = pricing_kernel_batch(model, t, fvals)
        phi_sq = float(np.max(np.einsum("ij,ij->i", phis, phis)))
        c = max(c, abs(2.0 * model.rate.at(t)) + phi_sq)
    horizon = float(grid[-1])
    return math.exp(-c * horizon), math.exp(c * horizon)


@dataclass
class BsdeSolution:
    """Time-gridded backward solution, grid-valued or regression-basis-valued.

    Deterministic solves store scalar values per node (z identically zero).
    Markovian solves store, per node, polynomial coefficients in the
    normalized factor for both the value and the driving component of Z.
    Solutions produced by the closed-form transformations keep the base
    tables and apply the pointwise map at evaluation time.
    """

    equation: str
    grid: np.ndarray
    y_values: np.ndarray
    z_values: np.ndarray
    bounds: tuple[float, float]
    n: int
    kind: str = "deterministic"
    basis_degree: int = 0
    basis_loc: np.ndarray | None = None
    basis_scale: np.ndarray | None = None
    driving_index: int = 0
    f0: float | None = None
    clamp_events: int = 0
    path_steps: int = 0
    replicates: list | None = None
    transform: tuple | None = None
    seed: int | None = None

    # -- raw (pre-transform) evaluation -------------------------------------

    def _node_value(self, i: int, f) -> float:
        if self.kind == "deterministic":
            return float(self.y_values[i])
        u = self._normalize(i, f)
        return float(np.polynomial.polynomial.polyval(u, self.y_values[i]))

    def _node_z(self, i: int, f) -> np.ndarray:
        if self.kind == "deterministic":
            return np.asarray(self.z_values[i], dtype=float)
        u = self._normalize(i, f)
        out = np.zeros(self.n)
        out[self.driving_index] = float(np.polynomial.polynomial.polyval(u, self.z_values[i]))
        return out

    def _normalize(self, i: int, f) -> float:
        if f is None:
            raise ConfigInvalid("factor state required for markovian solutions", field="f")
        return (float(f) - self.basis_loc[i]) / self.basis_scale[i]

    def _locate(self, t: float) -> tuple[int, int, float]:
        grid = self.grid
        if t <= grid[0]:
            return 0, 0, 0.0
        if t >= grid[-1]:
            return len(grid) - 1, len(grid) - 1, 0.0
        i = int(np.searchsorted(grid, t, side="right") - 1)
        w = (t - grid[i]) / (grid[i + 1] - grid[i])
        return i, i + 1, float(w)

    def _raw_value(self, t: float, f=None) -> float:
        i, j, w = self._locate(t)
        if i == j or w == 0.0:
            return self._node_value(i, f)
        return (1.0 - w) * self._node_value(i, f) + w * self._node_value(j, f)

    def _raw_z(self, t: float, f=None) -> np.ndarray:
        i, j, w = self._locate(t)
        if i == j or w == 0.0:
            return self._node_z(i, f)
        return (1.0 - w) * self._node_z(i, f) + w * self._node_z(j, f)

    # -- public evaluation ----------------------------------------------------

    def value(self, t: float, f=None) -> float:
        base = self._raw_value(t, f)
        if self.transform is None:
            return base
        if base <= 0:
            raise PositivityLost(f"base solution {base} <= 0 at t={t}")
        if self.transform[0] == "recip":
            return 1.0 / base
        h = self.transform[1].at(t)
        return h * h / base

    def z_at(self, t: float, f=None) -> np.ndarray:
        zb = self._raw_z(t, f)
        if self.transform is None:
            return zb
        base = self._raw_value(t, f)
        if base <= 0:
            raise PositivityLost(f"base solution {base} <= 0 at t={t}")
        if self.transform[0] == "recip":
            return -zb / (base * base)
        h = self.transform[1].at(t)
        return -(h * h / (base * base)) * zb

    def _node_value_batch(self, i: int, fvals: np.ndarray) -> np.ndarray:
        u = (np.asarray(fvals, dtype=float) - self.basis_loc[i]) / self.basis_scale[i]
        return np.polynomial.polynomial.polyval(u, self.y_values[i])

    def _node_zj_batch(self, i: int, fvals: np.ndarray) -> np.ndarray:
        u = (np.asarray(fvals, dtype=float) - self.basis_loc[i]) / self.basis_scale[i]
        return np.polynomial.polynomial.polyval(u, self.z_values[i])

    def _raw_batch(self, t: float, fvals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(value (N,), z (N, n)) before any transform."""
        i, j, w = self._locate(t)
        base = self._node_value_batch(i, fvals)
        zj = self._node_zj_batch(i, fvals)
        if j != i and w != 0.0:
            base = (1.0 - w) * base + w * self._node_value_batch(j, fvals)
            zj = (1.0 - w) * zj + w * self._node_zj_batch(j, fvals)
        z = np.zeros((len(fvals), self.n))
        z[:, self.driving_index] = zj
        return base, z

    def value_batch(self, t: float, fvals: np.ndarray) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(len(fvals), self.value(t))
        base, _ = self._raw_batch(t, fvals)
        if self.transform is None:
            return base
        if np.min(base) <= 0:
            raise PositivityLost(f"base solution reached {np.min(base)} at t={t}")
        if self.transform[0] == "recip":
            return 1.0 / base
        h = self.transform[1].at(t)
        return h * h / base

    def z_batch(self, t: float, fvals: np.ndarray) -> np.ndarray:
        if self.kind == "deterministic":
            return np.broadcast_to(self.z_at(t), (len(fvals), self.n)).copy()
        base, z = self._raw_batch(t, fvals)
        if self.transform is None:
            return z
        if np.min(base) <= 0:
            raise PositivityLost(f"base solution reached {np.min(base)} at t={t}")
        if self.transform[0] == "recip":
            return -z / (base * base)[:, None]
        h = self.transform[1].at(t)
        return -(h * h / (base * base))[:, None] * z

    @property
    def value0(self) -> float:
        return self.value(0.0, self.f0)

    @property
    def value0_stderr(self) -> float | None:
        vals = self.replicate_values0
        if vals is None:
            return None
        return float(np.std(vals, ddof=1))

    @property
    def replicate_values0(self) -> np.ndarray | None:
        if not self.replicates:
            return None
        return np.array([self.replicate(b).value(0.0, self.f0)
                         for b in range(len(self.replicates))])

    def replicate(self, b: int) -> "BsdeSolution":
        """Bootstrap replicate view (same transform, replicate tables)."""
        if not self.replicates:
            raise ConfigInvalid("solution carries no bootstrap replicates", field="replicates")
        y_tab, z_tab = self.replicates[b]
        return dc_replace(self, y_values=y_tab, z_values=z_tab, replicates=None)

    def min_value_on_grid(self) -> float:
        if self.kind == "deterministic":
            vals = self.y_values
        else:
            vals = np.array([self._node_value(i, self.basis_loc[i])
                             for i in range(len(self.grid))])
        return float(np.min(vals))


def _deterministic_rhs(model, cone, equation, t, v, r_step):
    """dv/dt for the Z == 0 reduction (scalar v).

    r_step is the exact average rate over the current integration step; for
    piecewise-constant r this keeps the linear rate term exact even when a
    step straddles a rate break.
    """
    sig = model.coefficients.sigma(t)
    phis = pricing_kernel_batch(model, t, np.array([0.0]))
    f = _driver_batch(equation, cone, sig, phis[0], r_step,
                      np.array([v]), np.zeros((1, sig.shape[1])))
    return -float(f[0])


def solve_deterministic(model: MarketModel, cone: Cone, equation: str,
                        steps: int) -> BsdeSolution:
    """Backward RK4 integration of the ODE obtained by setting Z identically 0."""
    if equation not in EQUATIONS:
        raise ConfigInvalid(f"unknown equation {equation!r}", field="equation")
    if model.coefficients.kind != "deterministic":
        raise ConfigInvalid("coefficients are not deterministic", field="coefficients")
    if steps < 10:
        raise ConfigInvalid("steps must be >= 10", field="steps")

    T = model.horizon_T
    grid = np.linspace(0.0, T, steps + 1)
    lower, upper = positivity_envelope(model, grid)
    dt = T / steps

    vals = np.empty(steps + 1)
    vals[steps] = 1.0
    v = 1.0
    for i in range(steps - 1, -1, -1):
        t1 = grid[i + 1]
        r_step = model.rate.integral(float(grid[i]), float(t1)) / dt
        k1 = _deterministic_rhs(model, cone, equation, t1, v, r_step)
        k2 = _deterministic_rhs(model, cone, equation, t1 - 0.5 * dt, v - 0.5 * dt * k1, r_step)
        k3 = _deterministic_rhs(model, cone, equation, t1 - 0.5 * dt, v - 0.5 * dt * k2, r_step)
        k4 = _deterministic_rhs(model, cone, equation, grid[i], v - dt * k3, r_step)
        v = v - dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if not math.isfinite(v) or v < lower * (1.0 - 1e-9):
            raise PositivityLost(
                f"{equation} crossed the positivity envelope at t={grid[i]:.6f}: "
                f"{v} < {lower}")
        vals[i] = v

    sol = BsdeSolution(
        equation=equation, grid=grid, y_values=vals,
        z_values=np.zeros((steps + 1, model.n)), bounds=(lower, upper), n=model.n,
    )
    _check_comparison_bound(model, sol)
    return sol


def _basis_matrix(fvals, loc, scale, degree):
    if scale < 1e-12:
        return np.ones((fvals.shape[0], 1))
    u = (fvals - loc) / scale
    return np.vander(u, degree + 1, increasing=True)


def _pad(coefs, width):
    out = np.zeros(width)
    out[: len(coefs)] = coefs
    return out


def _backward_pass(model, cone, equation, cfg, grid, F, dWj, lower, upper):
    """One full regression backward induction over stored forward paths.

    Each step closes with a trapezoidal driver solve,

        V_i = E[V_{i+1} + (dt/2) f_{i+1} | F_i] + (dt/2) f_i(V_i, Z_i),

    implicit in V_i; the terminal driver value is exact since Z_T = 0.
    The one-sided (implicit Euler) step carries an O(dt) bias that the
    identity checks can resolve at the default path budgets.
    """
    paths = F.shape[0]
    steps = cfg.steps
    dt = model.horizon_T / steps
    degree = cfg.basis_degree
    width = degree + 1
    j = model.coefficients.driving_index

    y_tab = np.zeros((steps + 1, width))
    z_tab = np.zeros((steps + 1, width))
    loc = np.zeros(steps + 1)
    scale = np.ones(steps + 1)
    y_tab[steps, 0] = 1.0

    v = np.ones(paths)
    f_next = _driver_batch(equation, cone,
                           model.coefficients.sigma_batch(float(grid[-1]), F[:, -1]),
                           pricing_kernel_batch(model, float(grid[-1]), F[:, -1]),
                           model.rate.at(float(grid[-1])),
                           v, np.zeros((paths, model.n)))
    clamps = 0
    for i in range(steps - 1, -1, -1):
        t = float(grid[i])
        fv = F[:, i]
        loc[i] = float(np.mean(fv))
        sd = float(np.std(fv))
        scale[i] = sd if sd >= 1e-12 else 1.0   # degenerate spread: constant basis
        phi = _basis_matrix(fv, loc[i], sd, degree)
        gram = phi.T @ phi
        if phi.shape[1] > 1 and np.linalg.cond(gram) > 1e12:
            raise RegressionIllConditioned(
                f"basis Gram condition {np.linalg.cond(gram):.2e} at t={t:.4f}")
        c_cont = np.linalg.solve(gram, phi.T @ (v + 0.5 * dt * f_next))
        cont = phi @ c_cont
        c_y = np.linalg.solve(gram, phi.T @ v)
        # centered martingale-increment estimator: same conditional
        # expectation as v * dW / dt, variance smaller by a factor ~ dt
        c_z = np.linalg.solve(gram, phi.T @ ((v - phi @ c_y) * dWj[:, i] / dt))
        zj = phi @ c_z

        sig_b = model.coefficients.sigma_batch(t, fv)
        phi_b = pricing_kernel_batch(model, t, fv)
        z_full = np.zeros((paths, model.n))
        z_full[:, j] = zj
        r_t = model.rate.at(t)

        v_new = np.clip(cont, lower, upper)
        for _ in range(_FIXED_POINT_MAX):
            f_val = _driver_batch(equation, cone, sig_b, phi_b, r_t,
                                  np.clip(v_new, lower, upper), z_full)
            nxt = cont + 0.5 * dt * f_val
            if float(np.max(np.abs(nxt - v_new))) < _FIXED_POINT_TOL:
                v_new = nxt
                break
            v_new = nxt
        below = v_new < lower
        above = v_new > upper
        clamps += int(np.count_nonzero(below) + np.count_nonzero(above))
        v = np.clip(v_new, lower, upper)
        f_next = _driver_batch(equation, cone, sig_b, phi_b, r_t, v, z_full)

        y_tab[i] = _pad(np.linalg.solve(gram, phi.T @ v), width)
        z_tab[i] = _pad(c_z, width)
    return y_tab, z_tab, loc, scale, clamps


def solve_markovian(model: MarketModel, cone: Cone, equation: str,
                    cfg: McSolverConfig) -> BsdeSolution:
    """Least-squares Monte Carlo backward induction for factor-driven coefficients."""
    if equation not in EQUATIONS:
        raise ConfigInvalid(f"unknown equation {equation!r}", field="equation")
    cf = model.coefficients
    if cf.kind != "markov":
        raise ConfigInvalid("coefficients are not markov-factor", field="coefficients")

    steps, paths = cfg.steps, cfg.paths
    T = model.horizon_T
    dt = T / steps
    grid = np.linspace(0.0, T, steps + 1)
    lower, upper = positivity_envelope(model, grid)

    # forward factor simulation, block-wise substreams for reproducibility
    F = np.empty((paths, steps + 1))
    dWj = np.empty((paths, steps))
    F[:, 0] = cf.f0
    start = 0
    block = 0
    sqdt = math.sqrt(dt)
    while start < paths:
        stop = min(start + cfg.block_size, paths)
        rng = substream(cfg.seed, block)
        dWj[start:stop] = sqdt * rng.standard_normal((stop - start, steps))
        start = stop
        block += 1
    for i in range(steps):
        F[:, i + 1] = F[:, i] + cf.kappa * (cf.mean_level - F[:, i]) * dt + cf.nu * dWj[:, i]

    y_tab, z_tab, loc, scale, clamps = _backward_pass(
        model, cone, equation, cfg, grid, F, dWj, lower, upper)
    if clamps > _CLAMP_BUDGET * paths * steps:
        raise PositivityLost(
            f"{clamps} clamp events exceed {_CLAMP_BUDGET:.1%} of {paths * steps} path-steps")

    replicates = []
    boot_rng = substream(cfg.seed, 45803)  # dedicated bootstrap lane
    for _ in range(cfg.bootstrap):
        idx = boot_rng.integers(0, paths, size=paths)
        rep = _backward_pass(model, cone, equation, cfg, grid, F[idx], dWj[idx],
                             lower, upper)
        replicates.append((rep[0], rep[1]))

    sol = BsdeSolution(
        equation=equation, grid=grid, y_values=y_tab, z_values=z_tab,
        bounds=(lower, upper), n=model.n, kind="markovian",
        basis_degree=cfg.basis_degree, basis_loc=loc, basis_scale=scale,
        driving_index=cf.driving_index, f0=cf.f0, clamp_events=clamps,
        path_steps=paths * steps, replicates=replicates or None, seed=cfg.seed,
    )
    _check_comparison_bound(model, sol)
    return sol


def _check_comparison_bound(model: MarketModel, sol: BsdeSolution) -> None:
    if sol.equation not in ("P1", "P2"):
        return
    h0_sq = model.h0 ** 2
    v0 = sol.value(0.0, sol.f0)
    if v0 > h0_sq + _BOUND_SLACK:
        raise InvalidBound(
            f"{sol.equation} initial value {v0} exceeds h0^2 = {h0_sq}")


def transform_p_to_y(p_sol: BsdeSolution) -> BsdeSolution:
    """(Y, Z) = (1/P, -Delta/P^2), valid whenever P stays uniformly positive."""
    if p_sol.equation != "P":
        raise ConfigInvalid(f"expected a P solution, got {p_sol.equation}", field="equation")
    if p_sol.transform is not None:
        raise ConfigInvalid("cannot re-transform a transformed solution", field="transform")
    lo, up = p_sol.bounds
    if p_sol.kind == "deterministic":
        p = p_sol.y_values
        if np.min(p) <= 0:
            raise PositivityLost("P solution is not uniformly positive")
        return dc_replace(
            p_sol, equation="Y", y_values=1.0 / p,
            z_values=-p_sol.z_values / (p * p)[:, None],
            bounds=(1.0 / up, 1.0 / lo),
        )
    if p_sol.min_value_on_grid() <= 0:
        raise PositivityLost("P solution is not uniformly positive")
    reps = None
    if p_sol.replicates:
        reps = list(p_sol.replicates)
    return dc_replace(p_sol, equation="Y", bounds=(1.0 / up, 1.0 / lo),
                      transform=("recip",), replicates=reps)


def transform_p2_to_y(p2_sol: BsdeSolution, h: DiscountFactor) -> BsdeSolution:
    """(Y, Z) = (h^2/P2, -(h^2/P2^2) Delta2)."""
    if p2_sol.equation != "P2":
        raise ConfigInvalid(f"expected a P2 solution, got {p2_sol.equation}", field="equation")
    if p2_sol.transform is not None:
        raise ConfigInvalid("cannot re-transform a transformed solution", field="transform")
    lo, up = p2_sol.bounds
    h_max = float(np.max(h.values)) if len(h.values) else 1.0
    h_min = float(np.min(h.values)) if len(h.values) else 1.0
    new_bounds = (h_min * h_min / up, h_max * h_max / lo)
    if p2_sol.kind == "deterministic":
        p = p2_sol.y_values
        if np.min(p) <= 0:
            raise PositivityLost("P2 solution is not uniformly positive")
        h_grid = np.array([h.at(float(t)) for t in p2_sol.grid])
        return dc_replace(
            p2_sol, equation="Y", y_values=h_grid ** 2 / p,
            z_values=-(h_grid ** 2 / (p * p))[:, None] * p2_sol.z_values,
            bounds=new_bounds,
        )
    if p2_sol.min_value_on_grid() <= 0:
        raise PositivityLost("P2 solution is not uniformly positive")
    reps = None
    if p2_sol.replicates:
        reps = list(p2_sol.replicates)
    return dc_replace(p2_sol, equation="Y", bounds=new_bounds,
                      transform=("h2", h), replicates=reps)
