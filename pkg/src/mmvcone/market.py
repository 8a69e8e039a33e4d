"""Market model: coefficients, pricing kernel and discount factor.

The market has a deterministic piecewise-constant interest rate and either
deterministic (time-interpolated) or Markov-factor-driven excess returns and
volatilities.  The factor, when present, is a one-dimensional mean-reverting
diffusion driven by one component of the Brownian motion, which keeps every
backward equation solvable by regression Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigInvalid,
    DegenerateVolatility,
    DimensionMismatch,
    NonPositiveTheta,
    SingularGram,
    TimeOutOfRange,
)

#: probe lattice used for the ellipticity check: time points x factor quantiles
PROBE_TIME_POINTS = 101
PROBE_FACTOR_QUANTILES = 21


def _norm_ppf(q: float) -> float:
    """Standard normal quantile by bisection on math.erf (no scipy needed)."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PiecewiseRate:
    """Piecewise-constant interest rate r(t) on [0, T].

    ``breaks[i]`` is the right endpoint of segment i; ``values[i]`` applies on
    [breaks[i-1], breaks[i]).  The last break must cover the horizon.
    """

    breaks: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.breaks) != len(self.values) or not self.breaks:
            raise ConfigInvalid("rate segments and values must align", field="rate")
        prev = 0.0
        for b in self.breaks:
            if not (b > prev and math.isfinite(b)):
                raise ConfigInvalid("segment ends must be increasing and finite", field="rate")
            prev = b
        if not all(math.isfinite(v) for v in self.values):
            raise ConfigInvalid("rate values must be finite", field="rate")

    @staticmethod
    def constant(r: float, horizon: float) -> "PiecewiseRate":
        return PiecewiseRate((horizon,), (float(r),))

    def at(self, t: float) -> float:
        for b, v in zip(self.breaks, self.values):
            if t < b:
                return v
        return self.values[-1]

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral of r over [t0, t1] (sum of segment rectangles)."""
        if t1 < t0:
            return -self.integral(t1, t0)
        total = 0.0
        seg_start = 0.0
        for b, v in zip(self.breaks, self.values):
            lo = max(seg_start, t0)
            hi = min(b, t1)
            if hi > lo:
                total += v * (hi - lo)
            seg_start = b
        if t1 > self.breaks[-1]:
            total += self.values[-1] * (t1 - max(t0, self.breaks[-1]))
        return total


def _as_time_grid(values, shape, name):
    """Normalize a constant or per-time-node array of matrices to (K, *shape)."""
    arr = np.asarray(values, dtype=float)
    if arr.shape == shape:
        return arr[None, ...]
    if arr.ndim == len(shape) + 1 and arr.shape[1:] == shape:
        return arr
    raise ConfigInvalid(f"expected shape {shape} or (K,)+{shape}, got {arr.shape}", field=name)


@dataclass(frozen=True)
class CoefficientField:
    """Excess-return and volatility coefficients, deterministic or factor-driven."""

    kind: str  # "deterministic" | "markov"
    m: int
    n: int
    # deterministic branch: values on a time grid, linearly interpolated
    times: np.ndarray | None = None
    mu_grid: np.ndarray | None = None          # (K, m)
    sigma_grid: np.ndarray | None = None       # (K, m, n)
    # markov branch: dF = kappa (mean_level - F) dt + nu dW_j
    kappa: float = 0.0
    mean_level: float = 0.0
    nu: float = 0.0
    driving_index: int = 0
    f0: float = 0.0
    mu_map: Callable | None = field(default=None, repr=False)
    sigma_map: Callable | None = field(default=None, repr=False)

    @staticmethod
    def deterministic(mu, sigma, times=None) -> "CoefficientField":
        mu_arr = np.atleast_1d(np.asarray(mu, dtype=float))
        if times is None:
            if mu_arr.ndim != 1:
                raise ConfigInvalid("constant mu must be a vector", field="coefficients.mu")
            m = mu_arr.shape[0]
            sig = np.atleast_2d(np.asarray(sigma, dtype=float))
            if sig.shape[0] != m:
                raise DimensionMismatch(f"sigma rows {sig.shape[0]} != m {m}")
            return CoefficientField(
                kind="deterministic", m=m, n=sig.shape[1],
                times=np.array([0.0]), mu_grid=mu_arr[None, :], sigma_grid=sig[None, :, :],
            )
        times = np.asarray(times, dtype=float)
        mu_g = _as_time_grid(mu, (np.asarray(mu, dtype=float).shape[-1],), "coefficients.mu")
        m = mu_g.shape[1]
        sig_g = _as_time_grid(sigma, np.asarray(sigma, dtype=float).shape[-2:], "coefficients.sigma")
        if sig_g.shape[1] != m:
            raise DimensionMismatch(f"sigma rows {sig_g.shape[1]} != m {m}")
        if mu_g.shape[0] != times.shape[0] or sig_g.shape[0] != times.shape[0]:
            raise ConfigInvalid("coefficient grids must match the time grid", field="coefficients")
        return CoefficientField(
            kind="deterministic", m=m, n=sig_g.shape[2],
            times=times, mu_grid=mu_g, sigma_grid=sig_g,
        )

    @staticmethod
    def markov_factor(m, n, kappa, mean_level, nu, driving_index, f0,
                      mu_map, sigma_map) -> "CoefficientField":
        if kappa < 0 or nu < 0:
            raise ConfigInvalid("kappa and nu must be nonnegative", field="coefficients")
        if not 0 <= driving_index < n:
            raise ConfigInvalid("driving_index must name a Brownian component", field="coefficients")
        cf = CoefficientField(
            kind="markov", m=m, n=n, kappa=float(kappa), mean_level=float(mean_level),
            nu=float(nu), driving_index=int(driving_index), f0=float(f0),
            mu_map=mu_map, sigma_map=sigma_map,
        )
        mu0 = cf.mu(0.0, f0)
        sig0 = cf.sigma(0.0, f0)
        if mu0.shape != (m,):
            raise DimensionMismatch(f"mu map returns shape {mu0.shape}, expected ({m},)")
        if sig0.shape != (m, n):
            raise DimensionMismatch(f"sigma map returns shape {sig0.shape}, expected ({m},{n})")
        return cf

    def _interp(self, grid, t):
        if grid.shape[0] == 1:
            return grid[0]
        times = self.times
        if t <= times[0]:
            return grid[0]
        if t >= times[-1]:
            return grid[-1]
        i = int(np.searchsorted(times, t) - 1)
        w = (t - times[i]) / (times[i + 1] - times[i])
        return (1.0 - w) * grid[i] + w * grid[i + 1]

    def mu(self, t: float, f: float | None = None) -> np.ndarray:
        if self.kind == "deterministic":
            return np.array(self._interp(self.mu_grid, t), dtype=float)
        return np.atleast_1d(np.asarray(self.mu_map(t, f), dtype=float))

    def sigma(self, t: float, f: float | None = None) -> np.ndarray:
        if self.kind == "deterministic":
            return np.array(self._interp(self.sigma_grid, t), dtype=float)
        return np.atleast_2d(np.asarray(self.sigma_map(t, f), dtype=float))

    def mu_batch(self, t: float, fvals: np.ndarray) -> np.ndarray:
        """(N,) factor states -> (N, m) excess returns."""
        if self.kind == "deterministic":
            return np.broadcast_to(self.mu(t), (fvals.shape[0], self.m)).copy()
        out = np.asarray(self.mu_map(t, fvals), dtype=float)
        if out.shape == (self.m,):
            out = np.broadcast_to(out, (fvals.shape[0], self.m)).copy()
        return out

    def sigma_batch(self, t: float, fvals: np.ndarray) -> np.ndarray:
        """(N,) factor states -> (N, m, n) volatilities."""
        if self.kind == "deterministic":
            return np.broadcast_to(self.sigma(t), (fvals.shape[0], self.m, self.n)).copy()
        out = np.asarray(self.sigma_map(t, fvals), dtype=float)
        if out.shape == (self.m, self.n):
            out = np.broadcast_to(out, (fvals.shape[0], self.m, self.n)).copy()
        return out

    def factor_quantiles(self, t: float, levels: Sequence[float]) -> np.ndarray:
        """Marginal quantiles of the factor at time t (Gaussian OU law)."""
        if self.kind != "markov":
            raise ValueError("factor quantiles only defined for markov coefficients")
        ekt = math.exp(-self.kappa * t)
        mean = self.mean_level + (self.f0 - self.mean_level) * ekt
        if self.kappa > 0:
            var = self.nu ** 2 * (1.0 - math.exp(-2.0 * self.kappa * t)) / (2.0 * self.kappa)
        else:
            var = self.nu ** 2 * t
        sd = math.sqrt(max(var, 0.0))
        if sd == 0.0:
            return np.full(len(levels), mean)
        return np.array([mean + sd * _norm_ppf(q) for q in levels])


def affine_factor_maps(m, n, mu0, mu1, sigma0, sigma1=None):
    """Build vectorized (t, F) -> mu / sigma maps that are affine in the factor."""
    mu0 = np.asarray(mu0, dtype=float).reshape(m)
    mu1 = np.asarray(mu1, dtype=float).reshape(m)
    sigma0 = np.asarray(sigma0, dtype=float).reshape(m, n)
    sigma1 = (np.zeros((m, n)) if sigma1 is None
              else np.asarray(sigma1, dtype=float).reshape(m, n))

    def mu_map(t, f):
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return mu0 + mu1 * float(f)
        return mu0[None, :] + np.outer(f, mu1)

    def sigma_map(t, f):
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return sigma0 + sigma1 * float(f)
        return sigma0[None, :, :] + f[:, None, None] * sigma1[None, :, :]

    return mu_map, sigma_map


@dataclass(frozen=True)
class MarketModel:
    """Validated market: dimensions, horizon, preferences and coefficients."""

    m: int
    n: int
    horizon_T: float
    x0: float
    theta: float
    rate: PiecewiseRate
    coefficients: CoefficientField
    delta: float
    probe_time_points: int = PROBE_TIME_POINTS
    probe_factor_quantiles: int = PROBE_FACTOR_QUANTILES

    def discount(self, t: float) -> float:
        """h_t = exp(integral of r over [t, T]); exact for piecewise-constant r."""
        if not 0.0 <= t <= self.horizon_T + 1e-12:
            raise TimeOutOfRange(f"t={t} outside [0, {self.horizon_T}]")
        return math.exp(self.rate.integral(t, self.horizon_T))

    @property
    def h0(self) -> float:
        return self.discount(0.0)

    def probe_points(self, time_points=None, factor_quantiles=None):
        """(t, f) lattice used for ellipticity and bound probes."""
        time_points = time_points or self.probe_time_points
        factor_quantiles = factor_quantiles or self.probe_factor_quantiles
        ts = np.linspace(0.0, self.horizon_T, time_points)
        if self.coefficients.kind == "deterministic":
            return [(t, None) for t in ts]
        levels = np.linspace(0.005, 0.995, factor_quantiles)
        out = []
        for t in ts:
            for fv in self.coefficients.factor_quantiles(t, levels):
                out.append((t, fv))
        return out


def build_model(config: dict) -> MarketModel:
    """Validate a model description and return an immutable MarketModel.

    Rejects inconsistent dimensions, non-positive risk aversion, and any
    volatility whose Gram matrix drops below delta * I on the probe lattice.
    """
    try:
        m = int(config["m"])
        n = int(config["n"])
        horizon = float(config["T"])
        x0 = float(config["x0"])
        theta = float(config["theta"])
        delta = float(config.get("delta", 1e-8))
    except KeyError as exc:
        raise ConfigInvalid("missing required field", field=str(exc)) from exc
    if m > n:
        raise DimensionMismatch(f"m={m} risky assets exceed Brownian dimension n={n}")
    if m < 1:
        raise ConfigInvalid("need at least one risky asset", field="m")
    if theta <= 0:
        raise NonPositiveTheta(f"theta={theta} must be > 0")
    if horizon <= 0:
        raise ConfigInvalid("horizon T must be > 0", field="T")
    if delta <= 0:
        raise ConfigInvalid("ellipticity floor delta must be > 0", field="delta")

    rate_cfg = config.get("rate", 0.0)
    if isinstance(rate_cfg, (int, float)):
        rate = PiecewiseRate.constant(float(rate_cfg), horizon)
    else:
        try:
            rate = PiecewiseRate(
                tuple(float(seg["until"]) for seg in rate_cfg),
                tuple(float(seg["value"]) for seg in rate_cfg),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigInvalid("rate segments need 'until' and 'value'", field="rate") from exc
    if rate.breaks[-1] < horizon - 1e-12:
        raise ConfigInvalid("rate segments must cover [0, T]", field="rate")

    coeff_cfg = config.get("coefficients")
    if coeff_cfg is None:
        raise ConfigInvalid("missing coefficients block", field="coefficients")
    kind = coeff_cfg.get("kind", "deterministic")
    if kind == "deterministic":
        coeffs = CoefficientField.deterministic(
            coeff_cfg["mu"], coeff_cfg["sigma"], coeff_cfg.get("times"),
        )
    elif kind in ("markov", "markov_factor"):
        mu_map, sigma_map = affine_factor_maps(
            m, n,
            coeff_cfg.get("mu0", np.zeros(m)), coeff_cfg.get("mu1", np.zeros(m)),
            coeff_cfg["sigma0"], coeff_cfg.get("sigma1"),
        )
        coeffs = CoefficientField.markov_factor(
            m, n, coeff_cfg["kappa"], coeff_cfg["mean"], coeff_cfg["nu"],
            coeff_cfg.get("driving_index", n - 1), coeff_cfg["f0"],
            mu_map, sigma_map,
        )
    else:
        raise ConfigInvalid(f"unknown coefficient kind {kind!r}", field="coefficients.kind")

    if coeffs.m != m or coeffs.n != n:
        raise DimensionMismatch(
            f"coefficients are {coeffs.m}x{coeffs.n}, model declares {m}x{n}")

    model = MarketModel(
        m=m, n=n, horizon_T=horizon, x0=x0, theta=theta,
        rate=rate, coefficients=coeffs, delta=delta,
        probe_time_points=int(config.get("probe_time_points", PROBE_TIME_POINTS)),
        probe_factor_quantiles=int(config.get("probe_factor_quantiles",
                                              PROBE_FACTOR_QUANTILES)),
    )
    _check_ellipticity(model)
    return model


def _check_ellipticity(model: MarketModel) -> None:
    for t, f in model.probe_points():
        sig = model.coefficients.sigma(t, f)
        if not np.all(np.isfinite(sig)) or not np.all(np.isfinite(model.coefficients.mu(t, f))):
            raise ConfigInvalid(f"non-finite coefficients at (t={t}, f={f})", field="coefficients")
        gram = sig @ sig.T
        min_eig = float(np.linalg.eigvalsh(gram)[0])
        if min_eig < model.delta:
            raise DegenerateVolatility(
                f"min eigenvalue of sigma sigma' = {min_eig:.3e} < delta={model.delta} "
                f"at (t={t:.4f}, f={f})")


def pricing_kernel(model: MarketModel, t: float, f: float | None = None) -> np.ndarray:
    """phi = sigma' (sigma sigma')^{-1} mu; the minimal-norm solution of sigma phi = mu."""
    if not 0.0 <= t <= model.horizon_T + 1e-12:
        raise TimeOutOfRange(f"t={t} outside [0, {model.horizon_T}]")
    sig = model.coefficients.sigma(t, f)
    mu = model.coefficients.mu(t, f)
    gram = sig @ sig.T
    try:
        w = np.linalg.solve(gram, mu)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("sigma sigma' is singular") from exc
    return sig.T @ w


def pricing_kernel_batch(model: MarketModel, t: float, fvals: np.ndarray) -> np.ndarray:
    """Vectorized pricing kernel over factor states: (N,) -> (N, n)."""
    sig = model.coefficients.sigma_batch(t, fvals)         # (N, m, n)
    mu = model.coefficients.mu_batch(t, fvals)             # (N, m)
    if model.m == 1:
        s = sig[:, 0, :]
        return (mu[:, 0] / np.einsum("ij,ij->i", s, s))[:, None] * s
    gram = sig @ np.swapaxes(sig, 1, 2)                    # (N, m, m)
    try:
        w = np.linalg.solve(gram, mu[..., None])           # (N, m, 1)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("sigma sigma' is singular") from exc
    return (np.swapaxes(sig, 1, 2) @ w)[..., 0]            # (N, n)


def discount_h(model: MarketModel, t: float) -> float:
    return model.discount(t)


@dataclass(frozen=True)
class DiscountFactor:
    """h on a time grid plus the exact evaluator backing it."""

    grid: np.ndarray
    values: np.ndarray
    rate: PiecewiseRate
    horizon_T: float

    @staticmethod
    def from_model(model: MarketModel, grid: np.ndarray) -> "DiscountFactor":
        vals = np.array([model.discount(float(t)) for t in grid])
        return DiscountFactor(grid=np.asarray(grid, dtype=float), values=vals,
                              rate=model.rate, horizon_T=model.horizon_T)

    def at(self, t: float) -> float:
        if not 0.0 <= t <= self.horizon_T + 1e-12:
            raise TimeOutOfRange(f"t={t} outside [0, {self.horizon_T}]")
        return math.exp(self.rate.integral(t, self.horizon_T))
