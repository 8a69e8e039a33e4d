"""Forward simulation of wealth and adversarial densities; saddle verification.

Paths are advanced under the physical measure only.  Objectives under a
tilted measure are estimated by density reweighting, E^{P^eta}[V] =
E[Lambda_T V], so one path ensemble (one seed) serves every adversary in a
family; this is also what gives the saddle scan common random numbers.
The riskless part of the wealth update uses the exact per-step growth
factor, so a zero portfolio compounds exactly; the density is advanced in
log space, which keeps it positive by construction.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution
from .cones import Cone
from .errors import (
    AdversaryNotZero,
    ConfigInvalid,
    ExplodedPath,
    MissingTrajectories,
    SaddleViolated,
)
from .market import MarketModel, pricing_kernel_batch
from .rng import substream
from .strategies import FeedbackStrategy, SaddleAdversary, mmv_value

_DEFAULT_BLOCK = 32768


@dataclass
class Adversary:
    """Bounded density loading eta(t, f); a parametric member of the class A.

    Boundedness (|eta| <= bound) keeps the density a square-integrable
    martingale, hence admissible; custom loadings must declare their bound
    and are clipped to it.
    """

    kind: str       # "zero" | "scaled_minus_phi" | "constant" | "saddle" | "custom"
    bound: float
    scale: float = 0.0
    vector: np.ndarray | None = None
    saddle: SaddleAdversary | None = None
    eta_fn: object = None         # custom: (t, fvals (N,)) -> (N, n)
    label: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def eta_batch(self, model: MarketModel, t: float, fvals: np.ndarray) -> np.ndarray:
        npaths = fvals.shape[0]
        if self.kind == "zero":
            return np.zeros((npaths, model.n))
        if self.kind == "scaled_minus_phi":
            if model.coefficients.kind == "deterministic":
                key = float(t)
                eta = self._cache.get(key)
                if eta is None:
                    eta = -self.scale * pricing_kernel_batch(model, key, np.zeros(1))[0]
                    self._cache[key] = eta
                return np.broadcast_to(eta, (npaths, model.n))
            return -self.scale * pricing_kernel_batch(model, t, fvals)
        if self.kind == "constant":
            return np.broadcast_to(self.vector, (npaths, model.n)).copy()
        if self.kind == "custom":
            out = np.asarray(self.eta_fn(t, fvals), dtype=float)
            if out.shape != (npaths, model.n):
                raise ConfigInvalid(f"custom eta returned shape {out.shape}, "
                                    f"expected ({npaths}, {model.n})", field="adversary")
            nrm = np.linalg.norm(out, axis=1)
            over = nrm > self.bound
            if np.any(over):
                out[over] *= (self.bound / nrm[over])[:, None]
            return out
        return self.saddle.eta_batch(t, fvals)


def zero_adversary() -> Adversary:
    return Adversary(kind="zero", bound=0.0, label="0")


def scaled_minus_phi(model: MarketModel, c: float) -> Adversary:
    top = max(float(np.linalg.norm(pricing_kernel_batch(
        model, t, np.array([f if f is not None else 0.0]))[0]))
        for t, f in model.probe_points(21, 7))
    return Adversary(kind="scaled_minus_phi", scale=c, bound=abs(c) * top * 1.5 + 1e-12,
                     label=f"{-c:g}*phi")


def constant_adversary(v) -> Adversary:
    v = np.asarray(v, dtype=float)
    return Adversary(kind="constant", vector=v, bound=float(np.linalg.norm(v)),
                     label="const")


def saddle_adversary(saddle: SaddleAdversary) -> Adversary:
    return Adversary(kind="saddle", saddle=saddle, bound=saddle.bound, label="eta_hat")


def custom_adversary(eta_fn, bound: float, label: str = "custom") -> Adversary:
    """Wrap a user-supplied loading map (t, fvals) -> (N, n); bound required."""
    if not bound > 0:
        raise ConfigInvalid("custom adversaries must declare a positive bound",
                            field="adversary.bound")
    return Adversary(kind="custom", eta_fn=eta_fn, bound=float(bound), label=label)


@dataclass
class SimBatchResult:
    """One simulated batch with terminal samples and optional trajectories."""

    paths: int
    steps: int
    seed: int
    adversary_kind: str
    theta: float
    terminal_X: np.ndarray
    terminal_Lambda: np.ndarray
    objective_mean: float
    objective_stderr: float
    conservation_max_residual: float | None = None
    times: np.ndarray | None = None
    X_paths: np.ndarray | None = None          # (paths, steps+1)
    Lambda_paths: np.ndarray | None = None
    F_paths: np.ndarray | None = None

    @property
    def has_trajectories(self) -> bool:
        return self.X_paths is not None


def _workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get("MMVCONE_WORKERS", "1")))
    except ValueError:
        return 1


def simulate(model: MarketModel, strategy: FeedbackStrategy | None,
             adversary: Adversary, paths: int, steps: int, seed: int, *,
             antithetic: bool = False, store_paths: bool = False,
             block_size: int = _DEFAULT_BLOCK, workers: int | None = None) -> SimBatchResult:
    """Euler-Maruyama batch under the physical measure.

    X follows the wealth equation with the feedback portfolio (exact
    riskless growth factor per step); Lambda follows the log-Euler scheme,
    positive by construction.  The objective estimate reweights by
    Lambda_T:  E^{P^eta}[X_T + (Lambda_T - 1)/(2 theta)].
    """
    if paths < 100:
        raise ConfigInvalid("paths must be >= 100", field="paths")
    if steps < 10:
        raise ConfigInvalid("steps must be >= 10", field="steps")
    cf = model.coefficients
    markov = cf.kind == "markov"
    T = model.horizon_T
    dt = T / steps
    times = np.linspace(0.0, T, steps + 1)
    sqdt = math.sqrt(dt)
    growth = np.array([math.exp(model.rate.integral(times[k], times[k + 1]))
                       for k in range(steps)])

    terminal_X = np.empty(paths)
    terminal_L = np.empty(paths)
    X_paths = np.empty((paths, steps + 1)) if store_paths else None
    L_paths = np.empty((paths, steps + 1)) if store_paths else None
    F_paths = np.empty((paths, steps + 1)) if (store_paths and markov) else None

    def run_block(block_index: int, start: int, stop: int) -> None:
        bs = stop - start
        rng = substream(seed, block_index)
        x = np.full(bs, float(model.x0))
        lam = np.ones(bs)
        f = np.full(bs, cf.f0) if markov else np.zeros(bs)
        if store_paths:
            X_paths[start:stop, 0] = x
            L_paths[start:stop, 0] = lam
            if markov:
                F_paths[start:stop, 0] = f
        for k in range(steps):
            t = times[k]
            if antithetic:
                half = (bs + 1) // 2
                d = rng.standard_normal((half, model.n))
                dw = sqdt * np.concatenate([d, -d[: bs - half]], axis=0)
            else:
                dw = sqdt * rng.standard_normal((bs, model.n))

            pi = (strategy.portfolio_batch(t, x, f if markov else None)
                  if strategy is not None else None)
            eta = adversary.eta_batch(model, t, f)

            if pi is None:
                x = growth[k] * x
            else:
                mu_b = cf.mu_batch(t, f)
                drift = np.einsum("im,im->i", pi, mu_b)
                if markov:
                    sig_b = cf.sigma_batch(t, f)
                    noise = np.einsum("im,imn,in->i", pi, sig_b, dw)
                else:
                    noise = np.einsum("im,mn,in->i", pi, cf.sigma(t), dw)
                x = growth[k] * x + drift * dt + noise
            lam = lam * np.exp(np.einsum("in,in->i", eta, dw)
                               - 0.5 * np.einsum("in,in->i", eta, eta) * dt)
            if markov:
                f = f + cf.kappa * (cf.mean_level - f) * dt + cf.nu * dw[:, cf.driving_index]
            if store_paths:
                X_paths[start:stop, k + 1] = x
                L_paths[start:stop, k + 1] = lam
                if markov:
                    F_paths[start:stop, k + 1] = f
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise ExplodedPath(f"non-finite state in block {block_index}; refine steps")
        terminal_X[start:stop] = x
        terminal_L[start:stop] = lam

    blocks = []
    start = 0
    bi = 0
    while start < paths:
        stop = min(start + block_size, paths)
        blocks.append((bi, start, stop))
        start = stop
        bi += 1

    nworkers = workers if workers is not None else _workers_from_env()
    if nworkers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            list(pool.map(lambda args: run_block(*args), blocks))
    else:
        for args in blocks:
            run_block(*args)

    theta = model.theta
    obj = terminal_L * (terminal_X + (terminal_L - 1.0) / (2.0 * theta))
    mean = float(np.mean(obj))
    stderr = float(np.std(obj, ddof=1) / math.sqrt(paths))
    return SimBatchResult(
        paths=paths, steps=steps, seed=seed, adversary_kind=adversary.kind,
        theta=theta, terminal_X=terminal_X, terminal_Lambda=terminal_L,
        objective_mean=mean, objective_stderr=stderr,
        times=times if store_paths else None, X_paths=X_paths,
        Lambda_paths=L_paths, F_paths=F_paths,
    )


def conservation_residual(batch: SimBatchResult, y_sol: BsdeSolution,
                          model: MarketModel) -> float:
    """Max over paths and grid times of |theta h X + Y Lambda - (theta h0 x + Y0)|."""
    if not batch.has_trajectories:
        raise MissingTrajectories("simulate(..., store_paths=True) required")
    theta = model.theta
    const = theta * model.h0 * model.x0 + y_sol.value0
    worst = 0.0
    for k, t in enumerate(batch.times):
        h_t = model.discount(float(t))
        if y_sol.kind == "deterministic":
            y_t = np.full(batch.paths, y_sol.value(float(t)))
        else:
            y_t = y_sol.value_batch(float(t), batch.F_paths[:, k])
        resid = np.abs(theta * h_t * batch.X_paths[:, k]
                       + y_t * batch.Lambda_paths[:, k] - const)
        worst = max(worst, float(np.max(resid)))
    batch.conservation_max_residual = worst
    return worst


@dataclass
class SaddleReport:
    """Objective matrix over a (portfolio, adversary) family with verdicts."""

    pi_labels: list
    eta_labels: list
    means: np.ndarray               # (n_pi, n_eta)
    stderrs: np.ndarray
    r0: float
    saddle_pi: int
    saddle_eta: int
    tol_stderr: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary_dict(self) -> dict:
        return {
            "r0": self.r0,
            "passed": self.passed,
            "violations": self.violations,
            "saddle_cell_mean": float(self.means[self.saddle_pi, self.saddle_eta]),
            "saddle_cell_stderr": float(self.stderrs[self.saddle_pi, self.saddle_eta]),
            "pi_labels": self.pi_labels,
            "eta_labels": self.eta_labels,
        }

    def csv_rows(self):
        yield ["pi\\eta"] + list(self.eta_labels)
        for i, lab in enumerate(self.pi_labels):
            yield [lab] + [f"{self.means[i, j]:.10g}+-{self.stderrs[i, j]:.3g}"
                           for j in range(len(self.eta_labels))]


def saddle_scan(model: MarketModel, cone: Cone, y_sol: BsdeSolution,
                pi_family: list, eta_family: list, paths: int, steps: int,
                seed: int, *, tol_stderr: float = 3.0,
                block_size: int = _DEFAULT_BLOCK) -> SaddleReport:
    """Estimate the objective on every family cell and check the saddle relations.

    Common random numbers: every cell reuses the same seed, hence the same
    Brownian increments.  Raises SaddleViolated on the first failed check.
    """
    saddle_pi = next((i for i, s in enumerate(pi_family)
                      if s is not None and s.kind == "MMV" and s.scale == 1.0), None)
    saddle_eta = next((j for j, a in enumerate(eta_family) if a.kind == "saddle"), None)
    if saddle_pi is None or saddle_eta is None:
        raise ConfigInvalid("families must include the saddle pair", field="families")

    n_pi, n_eta = len(pi_family), len(eta_family)
    means = np.empty((n_pi, n_eta))
    errs = np.empty((n_pi, n_eta))
    for i, strat in enumerate(pi_family):
        for j, adv in enumerate(eta_family):
            res = simulate(model, strat, adv, paths, steps, seed,
                           block_size=block_size)
            means[i, j] = res.objective_mean
            errs[i, j] = res.objective_stderr

    r0 = mmv_value(model, y_sol)
    pi_labels = [s.label if s is not None else "0" for s in pi_family]
    eta_labels = [a.label for a in eta_family]
    report = SaddleReport(pi_labels=pi_labels, eta_labels=eta_labels, means=means,
                          stderrs=errs, r0=r0, saddle_pi=saddle_pi,
                          saddle_eta=saddle_eta, tol_stderr=tol_stderr)

    def fail(cell, kind, mean_, err_, message):
        report.violations.append({"cell": cell, "kind": kind,
                                  "mean": float(mean_), "stderr": float(err_)})
        exc = SaddleViolated(message, cell=cell)
        exc.report = report
        raise exc

    for i in range(n_pi):
        if means[i, saddle_eta] > r0 + tol_stderr * errs[i, saddle_eta]:
            fail((pi_labels[i], eta_labels[saddle_eta]), "sup_bound",
                 means[i, saddle_eta], errs[i, saddle_eta],
                 f"objective {means[i, saddle_eta]:.8f} beats R0 {r0:.8f} "
                 f"beyond {tol_stderr} stderr")
    for j in range(n_eta):
        if means[saddle_pi, j] < r0 - tol_stderr * errs[saddle_pi, j]:
            fail((pi_labels[saddle_pi], eta_labels[j]), "inf_bound",
                 means[saddle_pi, j], errs[saddle_pi, j],
                 f"objective {means[saddle_pi, j]:.8f} dips below R0 {r0:.8f} "
                 f"beyond {tol_stderr} stderr")
    gap = abs(means[saddle_pi, saddle_eta] - r0)
    if gap > tol_stderr * errs[saddle_pi, saddle_eta]:
        fail((pi_labels[saddle_pi], eta_labels[saddle_eta]), "saddle_value",
             means[saddle_pi, saddle_eta], errs[saddle_pi, saddle_eta],
             f"saddle cell {means[saddle_pi, saddle_eta]:.8f} misses R0 {r0:.8f} "
             f"by more than {tol_stderr} stderr")
    return report


def mv_objective(batch: SimBatchResult, theta: float) -> tuple[float, float]:
    """Sample mean-variance objective E[X_T] - (theta/2) Var[X_T] with stderr.

    The stderr comes from the influence function of the (mean, variance)
    functional (delta method).  Requires a batch simulated under eta = 0.
    """
    if batch.adversary_kind != "zero":
        raise AdversaryNotZero(
            f"batch was simulated with adversary kind {batch.adversary_kind!r}")
    x = batch.terminal_X
    npaths = len(x)
    xbar = float(np.mean(x))
    s2 = float(np.var(x, ddof=1))
    value = xbar - 0.5 * theta * s2
    psi = (x - xbar) - 0.5 * theta * ((x - xbar) ** 2 - s2)
    stderr = float(np.std(psi, ddof=1) / math.sqrt(npaths))
    return value, stderr
