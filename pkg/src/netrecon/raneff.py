"""Random sender and receiver effects.

``(delta, gamma) ~ N(0, Sigma)`` with ``Var(delta_i) = s2_delta``,
``Var(gamma_i) = s2_gamma`` and ``Cov(delta_i, gamma_i) = s_dg`` for the same
node, independent across nodes. The coefficients maximise the penalised
expected log-likelihood under the moment condition; the variance components
maximise a restricted likelihood of working observations. The two steps
alternate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from netrecon.core import ReducedProblem
from netrecon.ipfp import FitResult
from netrecon.regression import (
    AugLagState,
    DesignMatrices,
    Theta,
    _Engine,
    _squarem_ecm,
    fit_constrained_ml,
    q_function,
)

log = logging.getLogger(__name__)

RIDGE = 1e-8
# search box for (log sigma_delta, log sigma_gamma, atanh rho)
BOUNDS = ((-7.0, 7.0), (-7.0, 7.0), (-4.0, 4.0))


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_delta: float
    sigma2_gamma: float
    sigma_dg: float = 0.0

    def __post_init__(self):
        if self.sigma2_delta < 0 or self.sigma2_gamma < 0:
            raise ValueError("variances must be non-negative")
        bound = np.sqrt(self.sigma2_delta * self.sigma2_gamma)
        if abs(self.sigma_dg) > bound * (1 + 1e-12) + 1e-300:
            raise ValueError("covariance matrix is not positive semi-definite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sigma2_delta, self.sigma_dg], [self.sigma_dg, self.sigma2_gamma]])

    @property
    def rho(self) -> float:
        d = np.sqrt(self.sigma2_delta * self.sigma2_gamma)
        return self.sigma_dg / d if d > 0 else 0.0

    @classmethod
    def from_params(cls, p) -> VarianceComponents:
        sd, sg, rho = np.exp(p[0]), np.exp(p[1]), np.tanh(p[2])
        return cls(sd * sd, sg * sg, rho * sd * sg)

    def params(self) -> np.ndarray:
        """``(log sigma_delta, log sigma_gamma, atanh rho)``, clipped to the search box."""
        tiny = np.exp(2 * BOUNDS[0][0])
        p = np.array([0.5 * np.log(max(self.sigma2_delta, tiny)),
                      0.5 * np.log(max(self.sigma2_gamma, tiny)),
                      np.arctanh(np.clip(self.rho, -0.999, 0.999))])
        return np.clip(p, [b[0] for b in BOUNDS], [b[1] for b in BOUNDS])


def sigma_matrix(vc: VarianceComponents, row_index, n: int) -> np.ndarray:
    """Covariance of the effects attached to the margins in ``row_index``."""
    ri = np.asarray(row_index)
    kind = (ri >= n).astype(int)
    node = ri % n
    C = vc.matrix
    return np.where(node[:, None] == node[None, :], C[kind[:, None], kind[None, :]], 0.0)


def _precision(vc: VarianceComponents, row_index, n: int) -> tuple[np.ndarray, bool]:
    S = sigma_matrix(vc, row_index, n)
    ev = np.linalg.eigvalsh(S) if len(S) else np.ones(1)
    ridged = bool(ev[0] <= 1e-12 * max(ev[-1], 1e-300))
    if ridged:
        S = S + RIDGE * np.eye(len(S))
    return np.linalg.inv(S), ridged


def _effects(theta: Theta, design: DesignMatrices) -> np.ndarray:
    return np.concatenate([theta.delta, theta.gamma])[design.row_index]


def penalized_q(theta: Theta, theta0: Theta | None, vartheta: VarianceComponents,
                design: DesignMatrices, *, xhat=None) -> tuple[float, np.ndarray]:
    """``Q(theta; theta0) - u' Sigma^-1 u / 2`` and its gradient.

    ``u`` stacks the sender and receiver effects of the kept margins. A
    singular ``Sigma`` is regularised by adding ``1e-8 I`` (with a warning).
    """
    val, grad = q_function(theta, theta0, design, xhat=xhat)
    prec, ridged = _precision(vartheta, design.row_index, design.n)
    if ridged:
        warnings.warn("singular effect covariance regularised with a 1e-8 ridge",
                      RuntimeWarning, stacklevel=2)
    u = _effects(theta, design)
    pu = prec @ u
    val -= 0.5 * u @ pu
    g = np.zeros(2 * design.n)
    g[design.row_index] = pu
    grad = grad.copy()
    grad[1:2 * design.n + 1] -= g
    return float(val), grad


# --------------------------------------------------------------------------
# restricted likelihood


def _low_rank(vc: VarianceComponents, U: np.ndarray, row_index, n: int) -> np.ndarray:
    """``G`` with ``U Sigma U' = G G'``."""
    ev, Q = np.linalg.eigh(sigma_matrix(vc, row_index, n))
    return U @ (Q * np.sqrt(np.clip(ev, 0.0, None)))


def reml_loglik(vartheta: VarianceComponents, ytilde, X, U, row_index=None,
                n: int | None = None) -> tuple[float, np.ndarray]:
    """Restricted log-likelihood of ``ytilde ~ N(X b, I + U Sigma U')``.

    Returns the value and the generalised least-squares estimate of ``b``.
    ``U`` has one column per margin in ``row_index`` (default: all ``2n``).
    Evaluated through the ``m x m`` capacitance matrix, never forming ``V``.
    """
    y = np.asarray(ytilde, float)
    X = np.asarray(X, float).reshape(len(y), -1)
    if row_index is None:
        row_index = np.arange(U.shape[1])
        n = U.shape[1] // 2
    G = _low_rank(vartheta, U, row_index, n)
    M = np.eye(G.shape[1]) + G.T @ G
    cM = linalg.cho_factor(M, lower=True)
    logdet_v = 2.0 * np.sum(np.log(np.diag(cM[0])))

    def vinv(B):
        return B - G @ linalg.cho_solve(cM, G.T @ B)

    ViX = vinv(X)
    XtViX = X.T @ ViX
    cX = linalg.cho_factor(XtViX, lower=True)
    b = linalg.cho_solve(cX, ViX.T @ y)
    r = y - X @ b
    quad = r @ vinv(r)
    logdet_x = 2.0 * np.sum(np.log(np.diag(cX[0])))
    return float(-0.5 * (logdet_v + logdet_x + quad)), b


def estimate_variance(ytilde, X, U, row_index=None, n: int | None = None,
                      start: VarianceComponents | None = None):
    """Maximise :func:`reml_loglik` over the PSD cone.

    Optimises ``(log sigma_delta, log sigma_gamma, atanh rho)`` with L-BFGS-B
    inside a box; a solution on the box edge (variance near 0 or correlation
    near +-1) is reported with ``boundary=True``. Returns ``(vc, info)``.
    """
    if row_index is None:
        row_index = np.arange(U.shape[1])
        n = U.shape[1] // 2
    start = start or VarianceComponents(1.0, 1.0, 0.0)

    def neg(p):
        return -reml_loglik(VarianceComponents.from_params(p), ytilde, X, U, row_index, n)[0]

    p0 = start.params()
    res = optimize.minimize(neg, p0, method="L-BFGS-B", bounds=BOUNDS,
                            options={"ftol": 1e-13, "gtol": 1e-9, "maxiter": 500})
    p = res.x
    if neg(p) > neg(p0):
        p = p0
    lo = np.array([b[0] for b in BOUNDS])
    hi = np.array([b[1] for b in BOUNDS])
    boundary = bool(np.any(p - lo < 1e-4) or np.any(hi - p < 1e-4))
    vc = VarianceComponents.from_params(p)
    return vc, {"loglik": -neg(p), "boundary": boundary, "success": bool(res.success),
                "params": p}


def _fixed_effects_design(design: DesignMatrices) -> np.ndarray:
    return np.column_stack([np.ones(design.N), design.Ztilde[:, design.keep]])


def working_response(mu1, mu0) -> np.ndarray:
    """``log mu1 + (mu0 - mu1) / mu1``."""
    mu1 = np.asarray(mu1, float)
    return np.log(mu1) + (np.asarray(mu0, float) - mu1) / mu1


def reml_variance(theta1: Theta, theta0: Theta, design: DesignMatrices, *, xhat=None,
                  start: VarianceComponents | None = None) -> VarianceComponents:
    """REML variance components from the working response at ``theta1``.

    The working response is built with ``mu(theta0)`` or, when given,
    ``xhat`` in its place.
    """
    mu1 = np.exp(design.linear_predictor(theta1))
    mu0 = np.exp(design.linear_predictor(theta0)) if xhat is None else np.asarray(xhat, float)
    vc, info = estimate_variance(working_response(mu1, mu0), _fixed_effects_design(design),
                                 design.U, design.row_index, design.n, start)
    if info["boundary"]:
        log.info("variance components on the boundary of the search box")
    return vc


# --------------------------------------------------------------------------
# alternating fit


class _Penalised:
    """Raw coefficients ``[c0, u, beta_std]`` and their penalised engine."""

    def __init__(self, problem: ReducedProblem, design: DesignMatrices):
        self.problem, self.design = problem, design
        self.X = np.column_stack([np.ones(design.N), design.U, design.standardized()])
        self.m = design.U.shape[1]

    def engine(self, vc: VarianceComponents) -> tuple[_Engine, bool]:
        prec, ridged = _precision(vc, self.design.row_index, self.design.n)
        K = np.zeros((self.X.shape[1],) * 2)
        K[1:1 + self.m, 1:1 + self.m] = prec
        return _Engine(self.problem, self.X, K), ridged

    def to_theta(self, p) -> Theta:
        d, m = self.design, self.m
        beta = np.zeros(d.l)
        beta[d.keep] = p[1 + m:] / d.scale[d.keep]
        full = np.zeros(2 * d.n)
        full[d.row_index] = p[1:1 + m]
        return Theta(full[:d.n], full[d.n:], beta, p[0] - beta @ d.center, d.names)

    def from_theta(self, th: Theta) -> np.ndarray:
        d = self.design
        bstd = (th.beta * d.scale)[d.keep]
        return np.concatenate([[th.intercept + th.beta @ d.center], _effects(th, d), bstd])


def fit_random_effects(problem: ReducedProblem, design: DesignMatrices,
                       config: AugLagState | None = None, *,
                       vartheta: VarianceComponents | None = None, fix_vartheta: bool = False,
                       max_alternations: int = 50, vartheta_tol: float = 1e-5) -> FitResult:
    """Alternate penalised constrained fits and REML variance updates.

    Starts from the fixed-effects fit. Each alternation runs the
    expectation/maximisation loop of :func:`fit_constrained_ml` with the
    Gaussian penalty at the current variance components, then re-estimates
    the components from the working response ``log mu + (xhat - mu) / mu``
    where ``xhat`` is the expected flow given the margins. With
    ``fix_vartheta`` the components stay at ``vartheta``. Stops when the
    coefficients move less than ``config.ecm_tol`` and the variance
    parameters less than ``vartheta_tol``.
    """
    cfg = config or AugLagState()
    design.check(problem)
    if not (design.spec.include_sender_effects and design.spec.include_receiver_effects):
        raise ValueError("random effects need both sender and receiver effects in the design")
    if fix_vartheta and vartheta is None:
        raise ValueError("fix_vartheta needs vartheta")
    base = fit_constrained_ml(problem, design, cfg)
    if problem.N == 0:
        return FitResult(base.mu, "raneff", base.converged, 0, 0.0, theta=base.theta,
                         vartheta=vartheta)
    pen = _Penalised(problem, design)
    p = pen.from_theta(base.theta)
    X = _fixed_effects_design(design)
    vc = vartheta
    if vc is None:
        eng0, _ = pen.engine(VarianceComponents(1.0, 1.0, 0.0))
        yt = working_response(eng0.mu(p), eng0.expected_flows(p))
        vc, _ = estimate_variance(yt, X, design.U, design.row_index, design.n)

    reml_trace: list[tuple[float, float]] = []
    ecm_iters, ridged_any, boundary = 0, False, False
    converged = False
    info = {"converged": False, "trace": ()}
    eng = None
    k = 0
    for k in range(1, max_alternations + 1):
        eng, ridged = pen.engine(vc)
        ridged_any |= ridged
        p_new, info = _squarem_ecm(eng, p, cfg, lambda q: pen.to_theta(q).vector(),
                                   first_xhat=eng.expected_flows(p))
        ecm_iters += info["iterations"]
        dtheta = np.max(np.abs(pen.to_theta(p_new).vector() - pen.to_theta(p).vector()))
        p = p_new
        if fix_vartheta:
            converged = info["converged"]
            break
        mu = eng.mu(p)
        yt = working_response(mu, eng.expected_flows(p))
        old = reml_loglik(vc, yt, X, design.U, design.row_index, design.n)[0]
        vc_new, rinfo = estimate_variance(yt, X, design.U, design.row_index, design.n, start=vc)
        if rinfo["loglik"] < old:
            # keep the current components rather than accept a worse value
            vc_new, rinfo["loglik"] = vc, old
        reml_trace.append((old, rinfo["loglik"]))
        boundary = rinfo["boundary"]
        dvar = np.max(np.abs(vc_new.params() - vc.params()))
        vc = vc_new
        if info["converged"] and dtheta <= cfg.ecm_tol and dvar <= vartheta_tol:
            converged = True
            break
    if not fix_vartheta and not converged:
        # final coefficients at the last variance components
        eng, _ = pen.engine(vc)
        p, info = _squarem_ecm(eng, p, cfg, lambda q: pen.to_theta(q).vector(),
                               first_xhat=eng.expected_flows(p))
    mu = eng.mu(p)
    res = problem.max_residual(mu)
    converged = bool(converged and res <= cfg.outer_tol * problem.scale)
    if not converged:
        log.warning("random-effects fit did not converge (residual %.3g)", res)
    return FitResult(
        mu, "raneff", converged, k, res, theta=pen.to_theta(p), vartheta=vc,
        trace=info["trace"],
        diagnostics={"alternations": k, "ecm_iterations": ecm_iters, "reml_trace": reml_trace,
                     "ridge": ridged_any, "boundary": boundary,
                     "dropped_covariates": design.dropped})
