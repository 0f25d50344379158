"""Maximum-entropy reconstruction from margins alone.

Under expected-margin constraints the entropy maximiser over non-negative
flows is a product of exponentials with means

    mu_ij = 1 / (lam_i + lam_{n+j}),

one multiplier per margin. The multipliers maximise the concave
log-likelihood ``sum_q log(lam_q1 + lam_q2) - lam . y`` whose score equations
are ``E_lam[A_r x] = y_r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from netrecon.core import InfeasibleMarginsError, ReducedProblem, is_feasible

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimated means on the reduced cells plus solver diagnostics.

    ``theta`` and ``vartheta`` are filled by the regression estimators;
    ``diagnostics`` holds estimator-specific extras (objective trace,
    iteration counts, flags).
    """

    mu: np.ndarray
    method: str
    converged: bool
    iterations: int
    residual: float
    theta: Any = None
    vartheta: Any = None
    trace: tuple[float, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class IpfpConfig:
    """``step`` selects the update: ``"hybrid"`` takes whichever of the
    proportional and the Newton step increases the likelihood more,
    ``"proportional"`` uses only the multiplicative update."""

    tol: float = 1e-10
    max_iter: int = 10_000
    init: str | np.ndarray = "uniform"
    step: str = "hybrid"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.step not in ("hybrid", "proportional"):
            raise ValueError(f"unknown step rule {self.step!r}")


def _pair_sums(lam, problem: ReducedProblem) -> np.ndarray:
    sr, rr = problem.cell_rows
    return lam[sr] + lam[rr]


def ipfp_loglik(lam, problem: ReducedProblem) -> float:
    """``-log c(lam) - lam . y`` with ``log c = sum_q log mu_q``."""
    lam = np.asarray(lam, float)
    s = _pair_sums(lam, problem)
    if np.any(s <= 0):
        raise ValueError("multipliers outside the domain: some lam_i + lam_{n+j} <= 0")
    return float(np.sum(np.log(s)) - lam @ problem.y)


def _gain(lam, step, s, problem) -> float:
    """Likelihood change of ``lam -> lam + step`` (accurate for small steps)."""
    ds = _pair_sums(step, problem)
    # a step onto or past the domain edge gives -inf or nan, which callers reject
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.log1p(ds / s)) - step @ problem.y)


def _initial(problem: ReducedProblem, init) -> np.ndarray:
    m = len(problem.y)
    if isinstance(init, str):
        if init != "uniform":
            raise ValueError(f"unknown init rule {init!r}")
        return np.full(m, m / problem.y.sum())
    lam = np.array(init, float)
    if lam.shape != (m,):
        raise ValueError("initial multipliers have the wrong length")
    return lam


def fit_ipfp(problem: ReducedProblem, config: IpfpConfig | None = None) -> FitResult:
    """Fit the maximum-entropy means to strictly positive reduced margins.

    Every accepted iteration increases the log-likelihood, so the trace in
    the result is non-decreasing. Convergence is declared when
    ``max |A mu - y| <= tol * max(1, ||y||_inf)``.

    Raises
    ------
    InfeasibleMarginsError
        If the iteration stalls and no non-negative matrix on the support
        matches the margins.
    """
    cfg = config or IpfpConfig()
    if problem.N == 0:
        return FitResult(np.zeros(0), "ipfp", True, 0, 0.0)
    A, y = problem.A, problem.y
    if np.any(y <= 0):
        raise ValueError("fit_ipfp needs strictly positive reduced margins")
    lam = _initial(problem, cfg.init)
    if np.any(_pair_sums(lam, problem) <= 0):
        raise ValueError("initial multipliers outside the domain")
    bound = cfg.tol * problem.scale
    trace = [ipfp_loglik(lam, problem)]
    kinds = {"proportional": 0, "newton": 0}
    converged = stalled = False
    k = 0
    for k in range(1, cfg.max_iter + 1):
        s = _pair_sums(lam, problem)
        mu = 1.0 / s
        E = A @ mu
        g = E - y
        if np.max(np.abs(g)) <= bound:
            converged = True
            k -= 1
            break
        best, best_gain, best_kind = None, 0.0, None
        if np.all(lam > 0):
            step = lam * E / y - lam
            gain = _gain(lam, step, s, problem)
            if gain > 0:
                best, best_gain, best_kind = step, gain, "proportional"
        if cfg.step == "hybrid":
            H = (A * mu**2) @ A.T
            d = np.linalg.lstsq(H, g, rcond=None)[0]
            slope = g @ d
            t = 1.0
            for _ in range(60):
                cand = t * d
                if np.all(_pair_sums(lam + cand, problem) > 0):
                    gain = _gain(lam, cand, s, problem)
                    if gain >= 1e-4 * t * slope:
                        if gain > best_gain:
                            best, best_gain, best_kind = cand, gain, "newton"
                        break
                t *= 0.5
        if best is None:
            stalled = True
            break
        lam = lam + best
        kinds[best_kind] += 1
        trace.append(trace[-1] + best_gain)
        if not np.all(np.isfinite(lam)) or np.max(np.abs(lam)) * problem.scale > 1e15:
            stalled = True
            break
    s = _pair_sums(lam, problem)
    mu = 1.0 / s if np.all(s > 0) else np.full(problem.N, np.nan)
    if not converged:
        if not is_feasible(problem):
            raise InfeasibleMarginsError("margins cannot be matched on the active cells")
        log.warning("ipfp stopped after %d iterations without reaching tol", k)
    res = problem.max_residual(mu) if np.all(np.isfinite(mu)) else float("inf")
    return FitResult(
        mu, "ipfp", converged, k, res, trace=tuple(trace),
        diagnostics={"multipliers": lam, "steps": kinds, "stalled": stalled})
