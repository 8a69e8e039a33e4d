"""Optimal feedback strategies, the adversarial density, and the dual calculus.

The robust problem's saddle strategy is exposed in wealth-feedback form

    pi(t, X) = ((a - h_t X) / (h_t Y_t)) (ss')^{-1} s Proj_{s'Gamma}(Y phi - Z),
    a = h_0 x + Y_0 / theta,

which the conservation identity makes equal to the density-feedback form
along the optimal dynamics, and which needs no simulation to evaluate.
The mean-variance side supplies the Lagrange dual machinery: the quadratics
J1/J2, the squared-distance curve F(K), its maximizer gamma_hat(K), the
optimal target K_hat, and the one-sided optimal feedback.  The infinite
values of F and gamma_hat on the boundary p_{i,0} = h_0^2 are legitimate
cases and are carried as IEEE infinities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .bsde import BsdeSolution
from .cones import Cone, project_transformed, project_transformed_batch
from .errors import ConfigInvalid, InvalidBound, PositivityLost
from .market import MarketModel, pricing_kernel, pricing_kernel_batch

_EQ_SLACK = 1e-10   # absolute slack detecting the p_{i,0} = h_0^2 boundary


def _require_positive(sol: BsdeSolution, label: str) -> None:
    if sol.min_value_on_grid() <= 0:
        raise PositivityLost(f"{label} solution is not uniformly positive")


@dataclass
class FeedbackStrategy:
    """State-feedback portfolio map, robust ("MMV") or mean-variance ("MV")."""

    kind: str
    model: MarketModel
    cone: Cone
    y_sol: BsdeSolution | None = None
    p1_sol: BsdeSolution | None = None
    p2_sol: BsdeSolution | None = None
    a_const: float | None = None
    gamma_hat: float | None = None
    scale: float = 1.0
    label: str = field(default="")
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.label:
            self.label = self.kind.lower()

    def _det_step(self, t: float):
        """Per-time constants for deterministic-coefficient models (cached)."""
        key = float(t)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        h_t = self.model.discount(key)
        phi = pricing_kernel(self.model, key)
        sig = self.model.coefficients.sigma(key)
        if self.kind == "MMV":
            y = self.y_sol.value(key)
            z = self.y_sol.z_at(key)
            gamma = project_transformed(self.cone, sig, y * phi - z).gamma_min
            hit = (h_t, y, gamma)
        else:
            p1 = self.p1_sol.value(key)
            d1 = self.p1_sol.z_at(key)
            p2 = self.p2_sol.value(key)
            d2 = self.p2_sol.z_at(key)
            g1 = project_transformed(self.cone, sig, -phi - d1 / p1).gamma_min
            g2 = project_transformed(self.cone, sig, phi + d2 / p2).gamma_min
            hit = (h_t, g1, g2)
        self._cache[key] = hit
        return hit

    # -- projected directions -------------------------------------------------

    def xi(self, t: float, f=None) -> np.ndarray:
        """MMV direction Proj_{s'Gamma}(Y phi - Z) in R^n."""
        y = self.y_sol.value(t, f)
        z = self.y_sol.z_at(t, f)
        phi = pricing_kernel(self.model, t, f)
        sig = self.model.coefficients.sigma(t, f)
        return project_transformed(self.cone, sig, y * phi - z).xi

    def xi1(self, t: float, f=None) -> np.ndarray:
        """MV short-side direction in R^m."""
        p1 = self.p1_sol.value(t, f)
        d1 = self.p1_sol.z_at(t, f)
        phi = pricing_kernel(self.model, t, f)
        sig = self.model.coefficients.sigma(t, f)
        return project_transformed(self.cone, sig, -phi - d1 / p1).gamma_min

    def xi2(self, t: float, f=None) -> np.ndarray:
        """MV long-side direction in R^m."""
        p2 = self.p2_sol.value(t, f)
        d2 = self.p2_sol.z_at(t, f)
        phi = pricing_kernel(self.model, t, f)
        sig = self.model.coefficients.sigma(t, f)
        return project_transformed(self.cone, sig, phi + d2 / p2).gamma_min

    # -- portfolio maps --------------------------------------------------------

    def portfolio(self, t: float, x: float, f=None) -> np.ndarray:
        h_t = self.model.discount(t)
        if self.kind == "MMV":
            y = self.y_sol.value(t, f)
            z = self.y_sol.z_at(t, f)
            phi = pricing_kernel(self.model, t, f)
            sig = self.model.coefficients.sigma(t, f)
            gamma = project_transformed(self.cone, sig, y * phi - z).gamma_min
            gap = self.a_const - h_t * x
            return self.scale * (gap / (h_t * y)) * gamma
        gap = x - self.gamma_hat / h_t
        pos, neg = max(gap, 0.0), max(-gap, 0.0)
        out = np.zeros(self.model.m)
        if pos > 0.0:
            out += pos * self.xi1(t, f)
        if neg > 0.0:
            out += neg * self.xi2(t, f)
        return self.scale * out

    def portfolio_one_sided(self, t: float, x: float, f=None) -> np.ndarray:
        """MV optimal form pi = -(X - gamma_hat/h) xi2 (valid on-manifold)."""
        if self.kind != "MV":
            raise ConfigInvalid("one-sided form is a mean-variance map", field="kind")
        h_t = self.model.discount(t)
        return self.scale * (-(x - self.gamma_hat / h_t)) * self.xi2(t, f)

    def portfolio_batch(self, t: float, xvals: np.ndarray, fvals=None) -> np.ndarray:
        """Vectorized feedback over many states: (N,) wealth -> (N, m)."""
        xvals = np.asarray(xvals, dtype=float)
        npaths = xvals.shape[0]
        if self.model.coefficients.kind == "deterministic":
            if self.kind == "MMV":
                h_t, y, gamma = self._det_step(t)
                gap = self.a_const - h_t * xvals
                return self.scale * np.outer(gap / (h_t * y), gamma)
            h_t, g1, g2 = self._det_step(t)
            gap = xvals - self.gamma_hat / h_t
            out = np.outer(np.maximum(-gap, 0.0), g2)
            out += np.outer(np.maximum(gap, 0.0), g1)
            return self.scale * out
        h_t = self.model.discount(t)
        if fvals is None:
            fvals = np.zeros(npaths)
        if self.kind == "MMV":
            y = self.y_sol.value_batch(t, fvals)
            z = self.y_sol.z_batch(t, fvals)
            phi = pricing_kernel_batch(self.model, t, fvals)
            sig = self.model.coefficients.sigma_batch(t, fvals)
            _, gamma, _ = project_transformed_batch(
                self.cone, sig, phi * y[:, None] - z)
            gap = self.a_const - h_t * xvals
            return self.scale * (gap / (h_t * y))[:, None] * gamma
        p2 = self.p2_sol.value_batch(t, fvals)
        d2 = self.p2_sol.z_batch(t, fvals)
        phi = pricing_kernel_batch(self.model, t, fvals)
        sig = self.model.coefficients.sigma_batch(t, fvals)
        _, g2, _ = project_transformed_batch(self.cone, sig, phi + d2 / p2[:, None])
        gap = xvals - self.gamma_hat / h_t
        out = np.maximum(-gap, 0.0)[:, None] * g2
        pos = gap > 0.0
        if np.any(pos):
            p1 = self.p1_sol.value_batch(t, fvals[pos])
            d1 = self.p1_sol.z_batch(t, fvals[pos])
            phi1 = phi[pos]
            sig1 = sig[pos] if sig.ndim == 3 else sig
            _, g1, _ = project_transformed_batch(
                self.cone, sig1, -phi1 - d1 / p1[:, None])
            out[pos] += gap[pos, None] * g1
        return self.scale * out

    def scaled(self, c: float, label: str | None = None) -> "FeedbackStrategy":
        out = dc_replace(self, scale=self.scale * c)
        out.label = label if label is not None else f"{c:g}*{self.label}"
        return out


def mmv_feedback(model: MarketModel, cone: Cone, y_sol: BsdeSolution) -> FeedbackStrategy:
    """Saddle portfolio in wealth-feedback form, with a = h_0 x + Y_0 / theta."""
    _require_positive(y_sol, "Y")
    a = model.h0 * model.x0 + y_sol.value0 / model.theta
    return FeedbackStrategy(kind="MMV", model=model, cone=cone, y_sol=y_sol,
                            a_const=a, label="pi_hat")


class SaddleAdversary:
    """Worst-case density loading eta_hat = -(Z + xi)/Y.

    Values are clipped to the declared bound (estimated on the probe lattice
    with a 50% margin) so the family stays inside the admissible class; the
    clip never binds on deterministic-coefficient models.
    """

    kind = "saddle"

    def __init__(self, y_sol: BsdeSolution, cone: Cone, model: MarketModel):
        _require_positive(y_sol, "Y")
        self.y_sol = y_sol
        self.cone = cone
        self.model = model
        self._cache: dict = {}
        self.bound = 1.5 * max(
            (float(np.linalg.norm(self._eta_point(t, f))) for t, f in model.probe_points(21, 7)),
            default=0.0,
        ) + 1e-12

    def _eta_point(self, t: float, f=None) -> np.ndarray:
        y = self.y_sol.value(t, f)
        z = self.y_sol.z_at(t, f)
        phi = pricing_kernel(self.model, t, f)
        sig = self.model.coefficients.sigma(t, f)
        xi = project_transformed(self.cone, sig, y * phi - z).xi
        return -(z + xi) / y

    def eta(self, t: float, f=None, lambda_state=None) -> np.ndarray:
        out = self._eta_point(t, f)
        nrm = float(np.linalg.norm(out))
        if nrm > self.bound:
            out = out * (self.bound / nrm)
        return out

    def eta_batch(self, t: float, fvals: np.ndarray) -> np.ndarray:
        if self.model.coefficients.kind == "deterministic":
            key = float(t)
            eta = self._cache.get(key)
            if eta is None:
                eta = self.eta(key)
                self._cache[key] = eta
            return np.broadcast_to(eta, (fvals.shape[0], self.model.n))
        y = self.y_sol.value_batch(t, fvals)
        z = self.y_sol.z_batch(t, fvals)
        phi = pricing_kernel_batch(self.model, t, fvals)
        sig = self.model.coefficients.sigma_batch(t, fvals)
        xi, _, _ = project_transformed_batch(self.cone, sig, phi * y[:, None] - z)
        out = -(z + xi) / y[:, None]
        nrm = np.linalg.norm(out, axis=1)
        over = nrm > self.bound
        if np.any(over):
            out[over] *= (self.bound / nrm[over])[:, None]
        return out


def mmv_adversary(y_sol: BsdeSolution, cone: Cone, model: MarketModel) -> SaddleAdversary:
    return SaddleAdversary(y_sol, cone, model)


def mv_feedback(model: MarketModel, cone: Cone, p1_sol: BsdeSolution,
                p2_sol: BsdeSolution) -> FeedbackStrategy:
    """Mean-variance feedback with the optimal Lagrange level gamma_hat."""
    _require_positive(p1_sol, "P1")
    _require_positive(p2_sol, "P2")
    h0 = model.h0
    p2_0 = p2_sol.value0
    if p2_0 > h0 * h0 + _EQ_SLACK:
        raise InvalidBound(f"P2_0 = {p2_0} exceeds h0^2 = {h0 * h0}")
    gamma_hat = model.x0 * h0 + h0 * h0 / (model.theta * p2_0)
    return FeedbackStrategy(kind="MV", model=model, cone=cone,
                            p1_sol=p1_sol, p2_sol=p2_sol,
                            gamma_hat=gamma_hat, label="pi_gamma_hat")


def mmv_value(model: MarketModel, y_sol: BsdeSolution) -> float:
    """Optimal robust value x h_0 + (Y_0 - 1) / (2 theta)."""
    _require_positive(y_sol, "Y")
    return model.x0 * model.h0 + (y_sol.value0 - 1.0) / (2.0 * model.theta)


@dataclass(frozen=True)
class DualCurve:
    """Lagrange-dual scalar functions of the mean-variance problem."""

    p1_0: float
    p2_0: float
    h0: float
    x: float
    theta: float

    def __post_init__(self):
        h0_sq = self.h0 * self.h0
        for name, v in (("p1_0", self.p1_0), ("p2_0", self.p2_0)):
            if not 0.0 < v <= h0_sq + _EQ_SLACK:
                raise InvalidBound(f"{name} = {v} outside (0, h0^2 = {h0_sq}]")
        if self.theta <= 0:
            raise InvalidBound(f"theta = {self.theta} must be positive")

    @property
    def _p1_boundary(self) -> bool:
        return self.h0 * self.h0 - self.p1_0 <= _EQ_SLACK

    @property
    def _p2_boundary(self) -> bool:
        return self.h0 * self.h0 - self.p2_0 <= _EQ_SLACK

    def J1(self, K: float, gamma: float) -> float:
        h0_sq = self.h0 * self.h0
        return ((self.p1_0 / h0_sq - 1.0) * gamma * gamma
                - 2.0 * (self.x * self.p1_0 / self.h0 - K) * gamma
                + self.p1_0 * self.x * self.x - K * K)

    def J2(self, K: float, gamma: float) -> float:
        h0_sq = self.h0 * self.h0
        return ((self.p2_0 / h0_sq - 1.0) * gamma * gamma
                - 2.0 * (self.x * self.p2_0 / self.h0 - K) * gamma
                + self.p2_0 * self.x * self.x - K * K)

    def F(self, K: float) -> float:
        """Minimal E[(X_T - K)^2] over portfolios with mean K; +inf if infeasible."""
        anchor = self.x * self.h0
        if K == anchor:
            return 0.0
        h0_sq = self.h0 * self.h0
        if K > anchor:
            if self._p2_boundary:
                return math.inf
            return self.p2_0 * (K - anchor) ** 2 / (h0_sq - self.p2_0)
        if self._p1_boundary:
            return math.inf
        return self.p1_0 * (K - anchor) ** 2 / (h0_sq - self.p1_0)

    def gamma_hat_of(self, K: float) -> float:
        """Maximizing Lagrange level for F(K); +-inf on the boundary cases."""
        anchor = self.x * self.h0
        if K == anchor:
            return anchor
        h0_sq = self.h0 * self.h0
        if K > anchor:
            if self._p2_boundary:
                return math.inf
            return (h0_sq * K - self.x * self.p2_0 * self.h0) / (h0_sq - self.p2_0)
        if self._p1_boundary:
            return -math.inf
        return (h0_sq * K - self.x * self.p1_0 * self.h0) / (h0_sq - self.p1_0)

    @property
    def K_hat(self) -> float:
        if self._p2_boundary:
            return self.x * self.h0
        return self.x * self.h0 + (self.h0 * self.h0 / self.p2_0 - 1.0) / self.theta

    @property
    def mv_value(self) -> float:
        if self._p2_boundary:
            return self.x * self.h0
        return self.x * self.h0 + (self.h0 * self.h0 / self.p2_0 - 1.0) / (2.0 * self.theta)

    @property
    def gamma_hat(self) -> float:
        return self.x * self.h0 + self.h0 * self.h0 / (self.theta * self.p2_0)

    def objective(self, K: float) -> float:
        """K - (theta/2) F(K), the quantity K_hat maximizes."""
        f = self.F(K)
        if math.isinf(f):
            return -math.inf
        return K - 0.5 * self.theta * f


def dual_curve(p1_0: float, p2_0: float, h0: float, x: float, theta: float) -> DualCurve:
    return DualCurve(p1_0=p1_0, p2_0=p2_0, h0=h0, x=x, theta=theta)


@dataclass
class EquivalenceReport:
    """Lattice comparison of the robust and mean-variance feedback maps."""

    t_values: np.ndarray
    x_values: np.ndarray
    f_values: np.ndarray | None
    rows: list                      # (t, X, f, pi_mmv, pi_mv, gap)
    max_gap: float
    value_mmv: float
    value_mv: float
    gamma_hat: float
    K_hat: float
    a_const: float
    max_gap_stderr: float | None = None   # combined stderr at the worst probe
    max_gap_ratio: float | None = None    # max over probes of gap / combined stderr
    value_stderr: float | None = None

    @property
    def value_gap(self) -> float:
        return abs(self.value_mmv - self.value_mv)

    def summary_dict(self) -> dict:
        out = {
            "value_mmv": self.value_mmv,
            "value_mv": self.value_mv,
            "value_gap": self.value_gap,
            "max_gap": self.max_gap,
            "gamma_hat": self.gamma_hat,
            "K_hat": self.K_hat,
        }
        if self.max_gap_stderr is not None:
            out["max_gap_stderr"] = self.max_gap_stderr
        if self.max_gap_ratio is not None:
            out["max_gap_ratio"] = self.max_gap_ratio
        if self.value_stderr is not None:
            out["value_stderr"] = self.value_stderr
        return out

    def csv_rows(self):
        m = len(self.rows[0][3])
        header = (["t", "X", "f"] + [f"pi_mmv_{k+1}" for k in range(m)]
                  + [f"pi_mv_{k+1}" for k in range(m)] + ["abs_gap"])
        yield header
        for t, x, f, pim, piv, gap in self.rows:
            yield [t, x, f if f is not None else ""] + list(pim) + list(piv) + [gap]


def equivalence_check(mmv: FeedbackStrategy, mv: FeedbackStrategy,
                      probe_grid) -> EquivalenceReport:
    """Evaluate both feedback maps on a (t, X) lattice and compare values.

    probe_grid is (t_values, x_values) or (t_values, x_values, f_values);
    factor values default to the mean factor path for factor-driven models.
    With bootstrap replicates available on both sides, the report carries a
    combined stderr for the worst probe and for the value gap.
    """
    model = mmv.model
    if len(probe_grid) == 2:
        t_values, x_values = probe_grid
        f_values = None
    else:
        t_values, x_values, f_values = probe_grid
    t_values = np.asarray(t_values, dtype=float)
    x_values = np.asarray(x_values, dtype=float)

    markov = model.coefficients.kind == "markov"

    def f_at(t):
        if f_values is not None:
            return f_values
        if markov:
            cf = model.coefficients
            mean = cf.mean_level + (cf.f0 - cf.mean_level) * math.exp(-cf.kappa * t)
            return np.array([mean])
        return np.array([None])

    probes = [(float(t), fv) for t in t_values for fv in f_at(t)]

    def lattice_eval(strategy):
        """(n_probes, n_x, m) portfolio values over the whole lattice."""
        out = []
        for t, fv in probes:
            fcol = None if fv is None else np.full(len(x_values), fv)
            out.append(strategy.portfolio_batch(t, x_values, fcol))
        return np.stack(out)

    pim = lattice_eval(mmv)
    piv = lattice_eval(mv)
    gaps = np.linalg.norm(pim - piv, axis=2)          # (n_probes, n_x)
    rows = []
    for p, (t, fv) in enumerate(probes):
        for k, xv in enumerate(x_values):
            rows.append((t, float(xv), fv, pim[p, k], piv[p, k], float(gaps[p, k])))
    flat = int(np.argmax(gaps))
    max_gap = float(gaps.flat[flat])

    value_mmv = mmv_value(model, mmv.y_sol)
    curve = dual_curve(mv.p1_sol.value0, mv.p2_sol.value0, model.h0,
                       model.x0, model.theta)

    gap_se = None
    gap_ratio = None
    val_se = None
    reps_y = mmv.y_sol.replicates
    reps_p2 = mv.p2_sol.replicates
    if reps_y and reps_p2:
        pim_reps, piv_reps, vm_reps, vv_reps = [], [], [], []
        for b in range(min(len(reps_y), len(reps_p2))):
            mmv_b = mmv_feedback(model, mmv.cone, mmv.y_sol.replicate(b))
            p2_b = mv.p2_sol.replicate(b)
            mv_b = mv_feedback(model, mv.cone, mv.p1_sol, p2_b)
            pim_reps.append(lattice_eval(mmv_b))
            piv_reps.append(lattice_eval(mv_b))
            vm_reps.append(mmv_value(model, mmv_b.y_sol))
            vv_reps.append(model.x0 * model.h0
                           + (model.h0 ** 2 / p2_b.value0 - 1.0) / (2.0 * model.theta))
        # per-probe combined stderr of the two (independent) solves
        var_m = np.var(np.stack(pim_reps), axis=0, ddof=1).sum(axis=2)
        var_v = np.var(np.stack(piv_reps), axis=0, ddof=1).sum(axis=2)
        se = np.sqrt(var_m + var_v)
        gap_se = float(se.flat[flat])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(gaps > 1e-12, gaps / se, 0.0)
        gap_ratio = float(np.max(ratios))
        val_se = math.hypot(float(np.std(vm_reps, ddof=1)), float(np.std(vv_reps, ddof=1)))

    return EquivalenceReport(
        t_values=t_values, x_values=x_values, f_values=f_values, rows=rows,
        max_gap=max_gap, value_mmv=value_mmv, value_mv=curve.mv_value,
        gamma_hat=mv.gamma_hat, K_hat=curve.K_hat, a_const=mmv.a_const,
        max_gap_stderr=gap_se, max_gap_ratio=gap_ratio, value_stderr=val_se,
    )
