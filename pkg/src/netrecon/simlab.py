"""Simulation studies comparing maximum-entropy and covariate regression fits.

Data come from ``x_ij ~ Exp(mean exp(delta_i + gamma_j + beta z_ij))`` with
``delta, gamma, z ~ N(0, 1)``. :func:`rss_study` compares squared errors
across fresh instances, :func:`bias_study` the per-cell bias of both
estimators for one fixed mean matrix.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from netrecon.core import (
    FlowMatrix,
    InfeasibleMarginsError,
    NodeSet,
    ReducedProblem,
    apply_margins,
    build_routing_matrix,
    reduce_problem,
)
from netrecon.ipfp import IpfpConfig, fit_ipfp
from netrecon.regression import (
    AugLagState,
    Covariate,
    ModelSpec,
    StepSizeError,
    build_design,
    fit_constrained_ml,
)
from netrecon.uncertainty import replicate_rng

log = logging.getLogger(__name__)

BETA_GRID = (-4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0)
SPEC = ModelSpec((Covariate("z", "dyadic"),))


@dataclass(frozen=True, eq=False)
class SimInstance:
    n: int
    beta: float
    delta: np.ndarray
    gamma: np.ndarray
    ztilde: np.ndarray
    mu_true: np.ndarray
    x: np.ndarray
    seed: int

    @property
    def nodes(self) -> NodeSet:
        return NodeSet.of_size(self.n)

    def flows(self) -> FlowMatrix:
        return FlowMatrix.from_dense(self.nodes, self.x)

    def problem(self) -> ReducedProblem:
        rt = build_routing_matrix(self.nodes)
        return reduce_problem(apply_margins(rt, self.flows()))


def _draw_effects(n: int, rng):
    return rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, n))


def _means(delta, gamma, z, beta) -> np.ndarray:
    mu = np.exp(delta[:, None] + gamma[None, :] + beta * z)
    np.fill_diagonal(mu, 0.0)
    return mu


def run_dgp(n: int, beta: float, seed: int, replicate: int = 0) -> SimInstance:
    """One instance; the diagonal of every matrix is 0 and ignored."""
    if n < 3:
        raise ValueError("need at least three nodes")
    rng = replicate_rng(seed, replicate)
    delta, gamma, z = _draw_effects(n, rng)
    np.fill_diagonal(z, 0.0)
    mu = _means(delta, gamma, z, beta)
    x = rng.exponential(np.where(mu > 0, mu, 1.0))
    np.fill_diagonal(x, 0.0)
    return SimInstance(n, float(beta), delta, gamma, z, mu, x, int(seed))


def _fit_pair(problem: ReducedProblem, z: np.ndarray, config: AugLagState | None,
              with_covariate: bool = True):
    """IPFP and regression means on the kept cells, or ``None`` on failure."""
    try:
        with warnings.catch_warnings():
            # non-convergence is counted by the caller
            warnings.simplefilter("ignore")
            ip = fit_ipfp(problem, IpfpConfig())
            design = build_design(problem, SPEC if with_covariate else ModelSpec(), {"z": z})
            rg = fit_constrained_ml(problem, design, config)
    except (InfeasibleMarginsError, StepSizeError, ValueError) as exc:
        log.debug("fit failed: %s", exc)
        return None
    if not (ip.converged and rg.converged):
        return None
    return ip.mu, rg.mu


def rss_ratio(x, mu_ipfp, mu_reg) -> float:
    """``sum (x - mu_ipfp)^2 / sum (x - mu_reg)^2``."""
    x = np.asarray(x, float)
    return float(np.sum((x - mu_ipfp) ** 2) / np.sum((x - mu_reg) ** 2))


@dataclass(frozen=True, eq=False)
class RssTable:
    rows: tuple[tuple[float, int, float], ...]
    failures: dict = field(default_factory=dict)

    def summaries(self) -> list[tuple[float, float, float]]:
        """``(beta, median, mean)`` per beta, in grid order."""
        out = []
        for b in dict.fromkeys(r[0] for r in self.rows):
            v = np.array([r[2] for r in self.rows if r[0] == b])
            out.append((b, float(np.median(v)), float(np.mean(v))))
        return out

    def values(self, beta: float) -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[0] == beta])


def rss_study(n: int = 10, beta_grid: Sequence[float] = BETA_GRID, S: int = 200, seed: int = 0,
              *, config: AugLagState | None = None, with_covariate: bool = True,
              replicate_seeds: Sequence[int] | None = None, workers: int = 1) -> RssTable:
    """RSS ratio of the IPFP fit against the regression fit per replicate.

    Replicate ``s`` at grid position ``k`` uses the stream ``(seed, k * S + s)``
    (or ``replicate_seeds[s]`` at every grid point). ``with_covariate=False``
    fits the regression without the covariate. Failed fits are dropped and
    counted per beta.
    """
    if S < 2:
        raise ValueError("S must be at least 2")
    grid = [float(b) for b in beta_grid]

    def one(task):
        k, b, s = task
        inst = (run_dgp(n, b, replicate_seeds[s], 0) if replicate_seeds is not None
                else run_dgp(n, b, seed, k * S + s))
        prob = inst.problem()
        pair = _fit_pair(prob, inst.ztilde, config, with_covariate)
        if pair is None:
            return b, s, None
        x = inst.x[prob.senders, prob.receivers]
        return b, s, rss_ratio(x, *pair)

    tasks = [(k, b, s) for k, b in enumerate(grid) for s in range(S)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(one, tasks))
    else:
        out = [one(t) for t in tasks]
    fails = {b: sum(1 for o in out if o[0] == b and o[2] is None) for b in grid}
    return RssTable(tuple(o for o in out if o[2] is not None), fails)


@dataclass(frozen=True, eq=False)
class BiasTable:
    """Normalised differences per cell, draw and estimator.

    ``delta[est]`` has shape ``(S_ok, N)``: ``(estimate - truth) / var`` where
    ``var`` is the variance of the estimates over the draws. Cells whose
    variance is zero are flagged in ``degenerate`` and get ``nan``.
    """

    cells: tuple[tuple[str, str], ...]
    delta: dict
    degenerate: np.ndarray
    failures: int = 0

    def median(self, estimator: str) -> np.ndarray:
        return np.median(self.delta[estimator], axis=0)

    def biased_share(self, estimator: str, threshold: float = 1.96) -> float:
        return float(np.mean(np.abs(self.median(estimator)) > threshold))

    def rows(self):
        """Tidy rows ``(cell, estimator, draw, delta)``."""
        for est, d in self.delta.items():
            for s in range(d.shape[0]):
                for q, c in enumerate(self.cells):
                    yield c, est, s, float(d[s, q])


def bias_study(n: int = 10, beta: float = -1.0, S: int = 200, seed: int = 0, *,
               config: AugLagState | None = None,
               replicate_seeds: Sequence[int] | None = None, workers: int = 1) -> BiasTable:
    """Bias of both estimators for fixed effects and covariate, redrawn flows.

    Effects and the covariate come from the stream ``(seed, 0)``; draw ``s``
    uses ``(seed, s + 1)`` or ``replicate_seeds[s]``.
    """
    if S < 2:
        raise ValueError("S must be at least 2")
    base = run_dgp(n, beta, seed, 0)
    mu_true = base.mu_true
    nodes = base.nodes
    rt = build_routing_matrix(nodes)
    truth = mu_true[rt.senders, rt.receivers]

    def one(s):
        rng = replicate_rng(*((replicate_seeds[s], 0) if replicate_seeds is not None
                              else (seed, s + 1)))
        x = rng.exponential(truth)
        prob = reduce_problem(apply_margins(rt, FlowMatrix(nodes, rt.senders, rt.receivers, x)))
        pair = _fit_pair(prob, base.ztilde, config)
        if pair is None or prob.N != rt.N:
            return None
        return pair

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(one, range(S)))
    else:
        out = [one(s) for s in range(S)]
    ok = [o for o in out if o is not None]
    est = {"ipfp": np.array([o[0] for o in ok]), "regression": np.array([o[1] for o in ok])}
    delta, degen = {}, np.zeros(rt.N, bool)
    for k, E in est.items():
        var = E.var(axis=0) if len(E) else np.zeros(rt.N)
        bad = ~(var > 0)
        degen |= bad
        with np.errstate(divide="ignore", invalid="ignore"):
            delta[k] = np.where(bad, np.nan, (E - truth) / np.where(bad, 1.0, var))
    return BiasTable(tuple(rt.cells), delta, degen, S - len(ok))
