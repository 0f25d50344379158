"""Parametric bootstrap for fitted means and unknown flows.

Each replicate draws flows from independent exponentials with the fitted
means, forms their margins and refits the same estimator to them. Quantiles
of the refitted means give confidence intervals for ``mu``; quantiles of
``mu_hat + (x* - mu*)`` give prediction intervals for the flows themselves.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from netrecon.core import FlowMatrix, InfeasibleMarginsError, ReducedProblem
from netrecon.ipfp import FitResult, IpfpConfig, fit_ipfp

log = logging.getLogger(__name__)

MAX_FAILED_SHARE = 0.2


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based stream for one replicate, independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


def simulate_exponential(mu, seed: int, replicate: int = 0):
    """Independent exponential draws with means ``mu``.

    ``mu`` may be a :class:`FlowMatrix` (returns one on the same cells) or an
    array. Every mean must be strictly positive.
    """
    values = mu.values if isinstance(mu, FlowMatrix) else np.asarray(mu, float)
    if np.any(~(values > 0)):
        raise ValueError("exponential means must be strictly positive")
    x = replicate_rng(seed, replicate).exponential(values)
    return mu.with_values(x) if isinstance(mu, FlowMatrix) else x


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Replicate draws and refits; rows of the arrays are successful replicates.

    ``replicates`` gives the replicate index of each row and ``failed`` the
    indices whose refit raised or did not converge.
    """

    B: int
    seed: int
    estimator: str
    mu_hat: np.ndarray
    mu_star: np.ndarray = field(repr=False)
    x_star: np.ndarray = field(repr=False)
    y_star: np.ndarray = field(repr=False)
    replicates: np.ndarray = field(repr=False)
    failed: tuple[int, ...] = ()
    max_residual: float = 0.0

    @property
    def e_star(self) -> np.ndarray:
        return self.x_star - self.mu_star

    @property
    def valid(self) -> bool:
        return len(self.failed) <= MAX_FAILED_SHARE * self.B


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Per-cell intervals in the reduced cell order; ``pi_lo`` is floored at 0."""

    mu_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    pi_lo: np.ndarray
    pi_hi: np.ndarray
    level: float
    quantile_rule: tuple[float, float]
    floored: int = 0


def _refitter(estimator, fit: FitResult, design, config) -> tuple[str, Callable]:
    if callable(estimator):
        return getattr(estimator, "__name__", "custom"), estimator
    tag = estimator or fit.method
    if tag == "ipfp":
        cfg = config if isinstance(config, IpfpConfig) else None
        return tag, lambda p: fit_ipfp(p, cfg)
    if tag in ("regression", "raneff"):
        if design is None:
            raise ValueError(f"estimator {tag!r} needs the design")
        from netrecon.regression import fit_constrained_ml
        from netrecon.raneff import fit_random_effects

        if tag == "regression":
            return tag, lambda p: fit_constrained_ml(p, design, config)
        return tag, lambda p: fit_random_effects(p, design, config)
    raise ValueError(f"unknown estimator {tag!r}")


def bootstrap(fit: FitResult, problem: ReducedProblem, design=None, B: int = 100,
              seed: int = 0, estimator: str | Callable | None = None, *, config=None,
              replicate_seeds: Sequence[int] | None = None, workers: int = 1) -> BootstrapResult:
    """Parametric bootstrap of ``fit`` with ``B`` replicates.

    ``estimator`` is a tag (``"ipfp"``, ``"regression"``, ``"raneff"``;
    default: the fit's own method) or a callable ``problem -> FitResult``.
    Replicate ``b`` draws from the stream keyed by ``(seed, b)`` unless
    ``replicate_seeds[b]`` overrides the seed. Results do not depend on
    ``workers``. Replicates whose refit fails are excluded and listed; more
    than 20% failures make the result invalid.
    """
    if B < 2:
        raise ValueError("need at least two replicates")
    if replicate_seeds is not None and len(replicate_seeds) != B:
        raise ValueError("replicate_seeds must have length B")
    tag, refit = _refitter(estimator, fit, design, config)
    mu = np.asarray(fit.mu, float)

    def one(b):
        s, rep = (seed, b) if replicate_seeds is None else (replicate_seeds[b], 0)
        x = simulate_exponential(mu, s, rep)
        y = problem.A @ x
        try:
            res = refit(problem.with_margins(y))
        except (InfeasibleMarginsError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d failed: %s", b, exc)
            return b, x, y, None, np.inf
        if not res.converged:
            return b, x, y, None, np.inf
        return b, x, y, res.mu, res.residual / max(1.0, float(np.max(y)))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(one, range(B)))
    else:
        out = [one(b) for b in range(B)]
    ok = [o for o in out if o[3] is not None]
    failed = tuple(o[0] for o in out if o[3] is None)
    N = len(mu)
    result = BootstrapResult(
        B, int(seed), tag, mu,
        np.array([o[3] for o in ok]).reshape(-1, N),
        np.array([o[1] for o in ok]).reshape(-1, N),
        np.array([o[2] for o in ok]).reshape(-1, len(problem.y)),
        np.array([o[0] for o in ok], int), failed,
        max((o[4] for o in ok), default=0.0))
    if not result.valid:
        warnings.warn(f"{len(failed)} of {B} bootstrap refits failed; result is invalid",
                      RuntimeWarning, stacklevel=2)
    return result


def intervals(boot: BootstrapResult, mu_hat=None, level: float = 0.95,
              quantile_rule: tuple[float, float] | None = None) -> IntervalSet:
    """Confidence and prediction intervals from bootstrap quantiles.

    The default rule is symmetric, ``((1 - level) / 2, (1 + level) / 2)``.
    A tail probability below ``1 / B`` cannot be resolved and is rejected.
    """
    if not boot.valid:
        raise ValueError("bootstrap is invalid (too many failed refits)")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if quantile_rule is None:
        quantile_rule = ((1 - level) / 2, (1 + level) / 2)
    lo, hi = map(float, quantile_rule)
    if not 0 <= lo < hi <= 1:
        raise ValueError("quantile rule must satisfy 0 <= lower < upper <= 1")
    b = len(boot.mu_star)
    if min(lo, 1 - hi) < 1.0 / b:
        raise ValueError(f"{b} replicates cannot resolve tail probability {min(lo, 1 - hi):g}")
    if mu_hat is None:
        mu_hat = boot.mu_hat
    elif isinstance(mu_hat, FitResult):
        mu_hat = mu_hat.mu
    mu_hat = np.asarray(mu_hat, float)
    ci = np.quantile(boot.mu_star, [lo, hi], axis=0)
    pi = np.quantile(mu_hat + boot.e_star, [lo, hi], axis=0)
    floored = int(np.sum(pi[0] < 0))
    return IntervalSet(mu_hat, ci[0], ci[1], np.maximum(pi[0], 0.0), np.maximum(pi[1], 0.0),
                       level, (lo, hi), floored)
