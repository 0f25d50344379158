"""Competing reconstruction estimators.

Every estimator except the ecological regression works on a single
:class:`ReducedProblem` and returns a :class:`FitResult`, so all methods can
be scored by the same harness.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize

from netrecon.core import (
    FlowMatrix,
    InfeasibleMarginsError,
    MarginSystem,
    ReducedProblem,
    is_feasible,
)
from netrecon.ipfp import FitResult, IpfpConfig, fit_ipfp
from netrecon.uncertainty import replicate_rng

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# gravity


def gravity_matrix(row_sums, col_sums) -> np.ndarray:
    """Dense ``r_i c_j / total`` including the diagonal."""
    r, c = np.asarray(row_sums, float), np.asarray(col_sums, float)
    total = r.sum()
    if not total > 0:
        raise ValueError("gravity needs a positive total flow")
    return np.outer(r, c) / total


def gravity(problem: ReducedProblem) -> FitResult:
    """Independence estimate ``x_i. x_.j / x..`` on the kept cells.

    The diagonal is excluded, so the margins are not matched exactly; the
    residual is reported.
    """
    y, n = problem.full_margins(), problem.n
    total = y[:n].sum()
    if not total > 0:
        raise ValueError("gravity needs a positive total flow")
    mu = y[problem.senders] * y[n + problem.receivers] / total
    return FitResult(mu, "gravity", True, 0, problem.max_residual(mu))


# --------------------------------------------------------------------------
# tomogravity


@dataclass(frozen=True)
class TomogravityConfig:
    psi: float = 0.01
    tol: float = 1e-12
    max_iter: int = 20_000

    def __post_init__(self):
        if not self.psi > 0:
            raise ValueError("psi must be positive")


def tomogravity_objective(mu, problem: ReducedProblem, psi: float) -> float:
    """``|A mu - y|^2 + psi^2 sum (mu_q / N) log(mu_q / (x_i. x_.j))``."""
    mu = np.asarray(mu, float)
    y, n = problem.full_margins(), problem.n
    prior = y[problem.senders] * y[n + problem.receivers]
    r = problem.A @ mu - problem.y
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(mu > 0, mu * np.log(mu / prior), 0.0)
    return float(r @ r + psi**2 * ent.sum() / problem.N)


def tomogravity(problem: ReducedProblem, config: TomogravityConfig | None = None) -> FitResult:
    """Least-squares margin fit pulled towards the gravity prior.

    Solved by L-BFGS-B from the gravity point with cell values bounded below
    by ``1e-12 x..``. The objective is convex, so the stationary point is
    the minimiser; the trace holds the objective at every iterate.
    """
    cfg = config or TomogravityConfig()
    if problem.N == 0:
        return FitResult(np.zeros(0), "tomogravity", True, 0, 0.0)
    A, yv, N = problem.A, problem.y, problem.N
    y, n = problem.full_margins(), problem.n
    prior = y[problem.senders] * y[n + problem.receivers]
    total = y[:n].sum()
    s2 = problem.scale**2
    w = cfg.psi**2 / N

    def fun(mu):
        r = A @ mu - yv
        lg = np.log(mu / prior)
        f = r @ r + w * (mu @ lg)
        g = 2 * A.T @ r + w * (lg + 1)
        return f / s2, g / s2

    floor = 1e-12 * total
    x0 = np.maximum(gravity(problem).mu, floor)
    trace = [fun(x0)[0] * s2]
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            bounds=[(floor, None)] * N,
                            callback=lambda xk: trace.append(fun(xk)[0] * s2),
                            options={"maxiter": cfg.max_iter, "ftol": cfg.tol,
                                     "gtol": cfg.tol, "maxcor": 30})
    mu = res.x
    g = fun(mu)[1] * s2
    proj = np.where(mu <= floor * (1 + 1e-9), np.minimum(g, 0.0), g)
    stat = float(np.max(np.abs(proj))) / problem.scale
    return FitResult(mu, "tomogravity", bool(res.success), int(res.nit), problem.max_residual(mu),
                     trace=tuple(trace), diagnostics={"stationarity": stat,
                                                      "message": str(res.message)})


# --------------------------------------------------------------------------
# non-negative lasso


@dataclass(frozen=True)
class LassoConfig:
    tau: float = 0.0
    tol: float = 1e-12
    max_iter: int = 100_000

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def lasso_kkt(mu, M, y, tau: float) -> float:
    """Largest violation of the optimality conditions, relative to ``max(1, |y|_inf)``.

    For ``mu_q > 0`` the gradient must vanish, for ``mu_q = 0`` it must be
    non-negative.
    """
    mu = np.asarray(mu, float)
    g = 2 * M.T @ (M @ mu - y) + tau
    viol = np.where(mu > 0, np.abs(g), np.maximum(-g, 0.0))
    return float(np.max(viol, initial=0.0)) / max(1.0, float(np.max(np.abs(y), initial=0.0)))


def nn_lasso_qp(M, y, tau: float, tol: float = 1e-12, max_iter: int = 100_000, mu0=None):
    """Cyclic coordinate descent for ``min |M mu - y|^2 + tau sum mu, mu >= 0``.

    Returns ``(mu, sweeps, converged, trace)``; ``trace`` holds the objective
    after every sweep and never increases.
    """
    M = np.asarray(M, float)
    y = np.asarray(y, float)
    p = M.shape[1]
    norms = np.sum(M * M, axis=0)
    mu = np.zeros(p) if mu0 is None else np.array(mu0, float)
    r = y - M @ mu
    cols = [np.flatnonzero(M[:, q]) for q in range(p)]
    vals = [M[c, q] for q, c in enumerate(cols)]
    scale = max(1.0, float(np.max(np.abs(y), initial=0.0)))

    def obj():
        return float(r @ r + tau * mu.sum())

    trace = [obj()]
    converged = False
    sweep = 0
    for sweep in range(1, max_iter + 1):
        delta = 0.0
        for q in range(p):
            if norms[q] == 0:
                continue
            c, v = cols[q], vals[q]
            old = mu[q]
            new = max(0.0, (v @ r[c] + norms[q] * old - tau / 2) / norms[q])
            if new != old:
                r[c] -= v * (new - old)
                mu[q] = new
                delta = max(delta, abs(new - old))
        trace.append(obj())
        if delta <= tol * scale:
            converged = True
            break
    return mu, sweep, converged, trace


def nn_lasso(problem: ReducedProblem, config: LassoConfig | None = None) -> FitResult:
    """Non-negative lasso on the routing equations."""
    cfg = config or LassoConfig()
    mu, sweeps, conv, trace = nn_lasso_qp(problem.A, problem.y, cfg.tau, cfg.tol, cfg.max_iter)
    kkt = lasso_kkt(mu, problem.A, problem.y, cfg.tau)
    return FitResult(mu, "nnlasso", conv, sweeps, problem.max_residual(mu), trace=tuple(trace),
                     diagnostics={"kkt": kkt})


# --------------------------------------------------------------------------
# ecological regression


@dataclass(frozen=True, eq=False)
class SharesMatrix:
    """``n x n`` transition shares with an empty diagonal.

    ``direction="columns"`` models row sums from column sums and its shares
    sum to one down each column; ``"rows"`` is the transposed analogue.
    """

    direction: str
    shares: np.ndarray
    raw_shares: np.ndarray
    underidentified: bool = False


def postprocess_shares(raw, direction: str = "columns") -> np.ndarray:
    """Clip negative shares to 0 and renormalise to unit sums.

    Sums run over each column (``columns``) or row (``rows``), diagonal
    excluded. A column or row that is zero after clipping becomes uniform.
    """
    S = np.clip(np.array(raw, float), 0.0, None)
    n = S.shape[0]
    np.fill_diagonal(S, 0.0)
    if direction == "rows":
        S = S.T
    sums = S.sum(axis=0)
    off = ~np.eye(n, dtype=bool)
    for j in np.flatnonzero(sums <= 0):
        S[:, j] = off[:, j] / (n - 1)
    S = S / S.sum(axis=0)
    if direction == "rows":
        S = np.ascontiguousarray(S.T)
    return _exact_unit_sums(S, 1 if direction == "rows" else 0)


_GRID = 2.0 ** 52


def _exact_unit_sums(S, axis):
    # on a 2**-52 grid every partial sum of entries in [0, 1] is exactly
    # representable, so the sum is exact in any order and the residue can be
    # placed on the largest entry without rounding
    S = np.floor(S * _GRID) / _GRID
    lines = S if axis == 1 else S.T
    top = np.argmax(lines, axis=1)
    rows = np.arange(lines.shape[0])
    lines[rows, top] += 1.0 - lines.sum(axis=1)
    return S


def ecological_regression(margin_series: Sequence[MarginSystem], direction: str = "columns"):
    """Time-constant transition shares fitted by least squares across periods.

    For ``direction="columns"`` each row sum is regressed on the other
    nodes' column sums, ``y_r,i^t = sum_{j != i} b_ij y_c,j^t``, and cells
    are predicted as ``b_ij y_c,j^t``. Returns ``(SharesMatrix, predictions)``
    with one :class:`FlowMatrix` per period on that period's active cells.
    """
    if direction not in ("columns", "rows"):
        raise ValueError("direction must be 'columns' or 'rows'")
    series = list(margin_series)
    T = len(series)
    if T < 2:
        raise ValueError("need at least two periods")
    nodes = series[0].nodes
    if any(m.nodes.labels != nodes.labels for m in series):
        raise ValueError("all periods must share the node set")
    n = nodes.n
    R = np.array([m.row_sums for m in series])
    C = np.array([m.col_sums for m in series])
    target, regs = (R, C) if direction == "columns" else (C, R)
    under = T < n
    if under:
        warnings.warn(f"{T} periods for {n} nodes: shares are not identified", stacklevel=2)
    raw = np.zeros((n, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        coef = np.linalg.lstsq(regs[:, others], target[:, i], rcond=None)[0]
        raw[i, others] = coef
    if direction == "rows":
        raw = raw.T
    shares = postprocess_shares(raw, direction)
    preds = []
    for t, m in enumerate(series):
        rt = m.routing
        base = m.col_sums[rt.receivers] if direction == "columns" else m.row_sums[rt.senders]
        vals = shares[rt.senders, rt.receivers] * base
        preds.append(FlowMatrix(rt.nodes, rt.senders, rt.receivers, vals, t))
    for a in (raw, shares):
        a.setflags(write=False)
    return SharesMatrix(direction, shares, raw, under), preds


# --------------------------------------------------------------------------
# hierarchical link models


@dataclass(frozen=True)
class HierarchicalConfig:
    model: str = "erdos"
    target_density: float = 0.5
    S: int = 100
    seed: int = 0
    alpha: float | None = None
    p: float | None = None
    mu_weight: float | None = None
    repair: IpfpConfig = field(default_factory=lambda: IpfpConfig(tol=1e-10, max_iter=2000))

    def __post_init__(self):
        if self.model not in ("erdos", "fitness"):
            raise ValueError("model must be 'erdos' or 'fitness'")
        if not 0 < self.target_density <= 1:
            raise ValueError("target_density must lie in (0, 1]")
        if self.S < 1:
            raise ValueError("S must be at least 1")


def fitness_scores(problem: ReducedProblem) -> np.ndarray:
    """``z_i = log(x_.i + x_i.)`` per node."""
    y, n = problem.full_margins(), problem.n
    with np.errstate(divide="ignore"):
        return np.log(y[:n] + y[n:])


def _fitness_density(alpha, zz) -> float:
    return float(np.mean(0.5 * (1 + np.tanh(0.5 * (alpha + zz)))))


def link_probabilities(config: HierarchicalConfig, problem: ReducedProblem) -> np.ndarray:
    if config.model == "erdos":
        if config.p is None:
            raise ValueError("config is not calibrated")
        return np.full(problem.N, config.p)
    if config.alpha is None:
        raise ValueError("config is not calibrated")
    z = fitness_scores(problem)
    if np.isposinf(config.alpha):
        return np.ones(problem.N)
    return 0.5 * (1 + np.tanh(0.5 * (config.alpha + z[problem.senders] + z[problem.receivers])))


def calibrate_density(config: HierarchicalConfig, problem: ReducedProblem) -> HierarchicalConfig:
    """Set ``p`` (Erdos-Renyi) or ``alpha`` (fitness) to hit the target density.

    For the fitness model ``alpha`` solves ``mean_q logistic(alpha + z_i + z_j)
    = density`` over the kept cells by bisection; density 1 gives
    ``alpha = inf``.
    """
    d = config.target_density
    if config.model == "erdos":
        cfg = replace(config, p=d)
    else:
        z = fitness_scores(problem)
        zz = z[problem.senders] + z[problem.receivers]
        if d == 1:
            alpha = np.inf
        else:
            lo, hi = -1.0 - zz.max(), 1.0 - zz.min()
            for _ in range(200):
                if _fitness_density(lo, zz) < d:
                    break
                lo = 2 * lo - 1
            for _ in range(200):
                if _fitness_density(hi, zz) > d:
                    break
                hi = 2 * hi + 1
            if not (_fitness_density(lo, zz) < d < _fitness_density(hi, zz)):
                raise ValueError(f"density {d} cannot be bracketed")
            alpha = optimize.bisect(lambda a: _fitness_density(a, zz) - d, lo, hi,
                                    xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
        cfg = replace(config, alpha=float(alpha))
    if cfg.mu_weight is None:
        total = problem.full_margins()[:problem.n].sum()
        expected = link_probabilities(cfg, problem).sum()
        cfg = replace(cfg, mu_weight=float(total / expected) if expected > 0 else 0.0)
    return cfg


def hierarchical_sample(problem: ReducedProblem, config: HierarchicalConfig) -> FitResult:
    """Average of margin-repaired random networks.

    Each sample draws a support from the link probabilities and exponential
    weights on it; the support is then repaired to the observed margins by
    the maximum-entropy fit restricted to it. Samples whose support cannot
    carry the margins count as failures; the estimate averages the others.
    More than half failing makes the result invalid (``converged=False``).
    """
    if config.p is None and config.alpha is None:
        config = calibrate_density(config, problem)
    probs = link_probabilities(config, problem)
    N = problem.N
    total = np.zeros(N)
    densities, weight_means = [], []
    failures = 0
    for s in range(config.S):
        rng = replicate_rng(config.seed, s)
        present = rng.random(N) < probs
        weights = rng.exponential(config.mu_weight or 1.0, N) * present
        densities.append(float(present.mean()) if N else 0.0)
        weight_means.append(float(weights[present].mean()) if present.any() else 0.0)
        try:
            sub = problem.restricted(present)
            if not is_feasible(sub):
                raise InfeasibleMarginsError("support cannot carry the margins")
            fit = fit_ipfp(sub, config.repair)
        except (InfeasibleMarginsError, ValueError) as exc:
            log.debug("sample %d not repairable: %s", s, exc)
            failures += 1
            continue
        if not fit.converged:
            failures += 1
            continue
        total[present] += fit.mu
    ok = config.S - failures
    valid = failures <= 0.5 * config.S
    mu = total / ok if ok else np.full(N, np.nan)
    if not valid:
        warnings.warn(f"{failures} of {config.S} samples could not be repaired", RuntimeWarning,
                      stacklevel=2)
    res = problem.max_residual(mu) if ok else float("inf")
    return FitResult(mu, "hierarchical", valid, config.S, res,
                     diagnostics={"densities": densities, "mean_density": float(np.mean(densities)),
                                  "failures": failures, "valid": valid,
                                  "weight_means": weight_means, "config": config})
