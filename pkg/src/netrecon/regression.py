"""Constrained maximum likelihood with log-linear means.

The model is ``x_ij ~ Exp(mean mu_ij)`` with

    log mu_ij = intercept + delta_i + gamma_j + z_ij' beta,

fitted subject to the moment condition ``A mu = y``. Fitting alternates an
expectation step, which replaces the unobserved flows by an approximation of
their conditional mean given the margins, and a maximisation step that
maximises the expected log-likelihood ``Q`` under the moment condition with
an augmented Lagrangian.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg, optimize

from netrecon.core import ReducedProblem
from netrecon.ipfp import FitResult

log = logging.getLogger(__name__)

CLIP = 700.0
KINDS = ("nodal-sender", "nodal-receiver", "dyadic")
TRANSFORMS = {"identity": lambda v: v, "log": np.log, "log1p": np.log1p}


class StepSizeError(RuntimeError):
    """The inner line search could not find a descent step."""


# --------------------------------------------------------------------------
# model specification and design


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str
    transform: str = "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"covariate kind must be one of {KINDS}, got {self.kind!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class ModelSpec:
    covariates: tuple[Covariate, ...] = ()
    include_sender_effects: bool = True
    include_receiver_effects: bool = True
    random_effects: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Design aligned with the kept cells of a reduced problem.

    ``U`` holds the sender/receiver indicators (one column per kept margin),
    ``Ztilde`` the transformed exogenous covariates on their original scale
    and ``Z = [U | Ztilde]``. Exogenous columns are standardised internally
    with ``center``/``scale``; ``keep`` marks the columns that are linearly
    independent of the indicators (and of earlier columns). Dropped columns
    always receive a zero coefficient.
    """

    spec: ModelSpec
    Z: np.ndarray = field(repr=False)
    Ztilde: np.ndarray = field(repr=False)
    U: np.ndarray = field(repr=False)
    center: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    n: int
    senders: np.ndarray = field(repr=False)
    receivers: np.ndarray = field(repr=False)
    row_index: np.ndarray = field(repr=False)

    @property
    def names(self) -> tuple[str, ...]:
        return self.spec.names

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def l(self) -> int:
        return self.Ztilde.shape[1]

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(nm for nm, k in zip(self.names, self.keep) if not k)

    def indicator_block(self) -> np.ndarray:
        """Indicator columns used by the fixed-effects model."""
        n, ri = self.n, self.row_index
        cols = []
        if self.spec.include_sender_effects:
            cols.append(ri < n)
        if self.spec.include_receiver_effects:
            cols.append(ri >= n)
        if not cols:
            return self.U[:, :0]
        return self.U[:, np.any(cols, axis=0)]

    def standardized(self) -> np.ndarray:
        """Kept exogenous columns, centred and scaled."""
        k = self.keep
        return (self.Ztilde[:, k] - self.center[k]) / self.scale[k]

    def linear_predictor(self, theta: Theta) -> np.ndarray:
        eta = theta.intercept + theta.delta[self.senders] + theta.gamma[self.receivers]
        if self.l:
            eta = eta + self.Ztilde @ theta.beta
        return eta

    def check(self, problem: ReducedProblem) -> None:
        if self.N != problem.N or not np.array_equal(self.senders, problem.senders) \
                or not np.array_equal(self.receivers, problem.receivers):
            raise ValueError("design does not match the problem's cells")


def _covariate_values(cov: Covariate, data, problem: ReducedProblem) -> np.ndarray:
    nodes = problem.nodes
    s, r = problem.senders, problem.receivers
    missing = []
    if cov.kind == "dyadic":
        if isinstance(data, Mapping):
            vals = np.empty(problem.N)
            for q, (i, j) in enumerate(zip(s, r)):
                key = (nodes.labels[i], nodes.labels[j])
                if key in data:
                    vals[q] = float(data[key])
                else:
                    missing.append(key)
        else:
            arr = np.asarray(data, float)
            if arr.shape != (nodes.n, nodes.n):
                raise ValueError(f"dyadic covariate {cov.name!r} must be an n x n array")
            vals = arr[s, r]
    else:
        idx = s if cov.kind == "nodal-sender" else r
        if isinstance(data, Mapping):
            node_vals = np.full(nodes.n, np.nan)
            for k in np.unique(idx):
                lab = nodes.labels[k]
                if lab in data:
                    node_vals[k] = float(data[lab])
                else:
                    missing.append(lab)
        else:
            node_vals = np.asarray(data, float)
            if node_vals.shape != (nodes.n,):
                raise ValueError(f"nodal covariate {cov.name!r} needs one value per node")
        vals = node_vals[idx]
    if missing:
        raise ValueError(f"covariate {cov.name!r} has no value for {missing}")
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"covariate {cov.name!r} has non-finite values")
    if cov.transform == "log" and np.any(vals <= 0):
        raise ValueError(f"covariate {cov.name!r}: log transform needs positive values")
    if cov.transform == "log1p" and np.any(vals <= -1):
        raise ValueError(f"covariate {cov.name!r}: log1p transform needs values > -1")
    return TRANSFORMS[cov.transform](vals)


def build_design(problem: ReducedProblem, spec: ModelSpec | None = None,
                 covariate_data: Mapping | None = None) -> DesignMatrices:
    """Assemble indicators and exogenous columns for the kept cells.

    ``covariate_data`` maps covariate names to values: for nodal covariates a
    mapping ``label -> value`` or a length-``n`` array, for dyadic ones a
    mapping ``(label_i, label_j) -> value`` or an ``n x n`` array.
    """
    spec = spec or ModelSpec()
    covariate_data = covariate_data or {}
    N = problem.N
    U = problem.A.T.copy()
    cols = []
    for cov in spec.covariates:
        if cov.name not in covariate_data:
            raise ValueError(f"no data supplied for covariate {cov.name!r}")
        cols.append(_covariate_values(cov, covariate_data[cov.name], problem))
    Zt = np.column_stack(cols) if cols else np.zeros((N, 0))
    center = Zt.mean(axis=0) if N else np.zeros(Zt.shape[1])
    scale = Zt.std(axis=0) if N else np.ones(Zt.shape[1])
    scale = np.where(scale > 0, scale, 1.0)

    partial = DesignMatrices(spec, U, Zt, U, center, scale, np.ones(Zt.shape[1], bool),
                             problem.n, problem.senders, problem.receivers, problem.row_index)
    base = np.column_stack([np.ones(N), partial.indicator_block()])
    Q = linalg.orth(base) if N else base
    keep = np.zeros(Zt.shape[1], bool)
    for k in range(Zt.shape[1]):
        col = (Zt[:, k] - center[k]) / scale[k]
        res = col - Q @ (Q.T @ col)
        if np.linalg.norm(res) > 1e-8 * np.sqrt(max(N, 1)):
            keep[k] = True
            Q = np.column_stack([Q, res / np.linalg.norm(res)])
    dropped = [c.name for c, k in zip(spec.covariates, keep) if not k]
    if dropped:
        warnings.warn(f"covariates {dropped} are collinear with the sender/receiver "
                      "effects and are dropped (coefficient fixed at 0)", stacklevel=2)
    Z = np.column_stack([U, Zt])
    for a in (U, Zt, Z, center, scale, keep):
        a.setflags(write=False)
    return replace(partial, Z=Z, keep=keep)


# --------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True, eq=False)
class Theta:
    """Coefficients ``(intercept, delta, gamma, beta)`` on the original scale.

    Fixed-effects fits report ``delta`` and ``gamma`` centred over the kept
    margins, so the intercept carries the overall level. Entries for nodes
    without a positive margin are 0.
    """

    delta: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    intercept: float = 0.0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        for nm in ("delta", "gamma", "beta"):
            a = np.array(getattr(self, nm), float).ravel()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{nm} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, nm, a)
        if len(self.delta) != len(self.gamma):
            raise ValueError("delta and gamma must have the same length")
        object.__setattr__(self, "intercept", float(self.intercept))

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.delta, self.gamma, self.beta])

    @classmethod
    def from_vector(cls, v, n: int, names: Sequence[str] = ()) -> Theta:
        v = np.asarray(v, float)
        return cls(v[1:n + 1], v[n + 1:2 * n + 1], v[2 * n + 1:], v[0], tuple(names))

    @classmethod
    def zeros(cls, design: DesignMatrices) -> Theta:
        return cls(np.zeros(design.n), np.zeros(design.n), np.zeros(design.l), 0.0, design.names)


def _grad_blocks(design: DesignMatrices, e: np.ndarray) -> np.ndarray:
    """``sum_q z_q e_q`` in the layout of :meth:`Theta.vector`."""
    n = design.n
    return np.concatenate([[e.sum()],
                           np.bincount(design.senders, e, n),
                           np.bincount(design.receivers, e, n),
                           design.Ztilde.T @ e])


def q_function(theta: Theta, theta0: Theta | None, design: DesignMatrices, *,
               xhat=None) -> tuple[float, np.ndarray]:
    """Expected complete-data log-likelihood and its gradient.

    ``Q(theta; theta0) = sum_q (-eta_q - xhat_q exp(-eta_q))`` with
    ``xhat = mu(theta0)`` unless ``xhat`` (expected flows) is given. The
    gradient is with respect to :meth:`Theta.vector`. Exponents are clipped
    to ``+-700``; a warning reports how many were clipped.
    """
    eta = design.linear_predictor(theta)
    if xhat is None:
        if theta0 is None:
            raise ValueError("need theta0 or xhat")
        d = design.linear_predictor(theta0) - eta
        clipped = int(np.sum(np.abs(d) > CLIP))
        e = np.exp(np.clip(d, -CLIP, CLIP))
    else:
        xhat = np.asarray(xhat, float)
        clipped = int(np.sum(np.abs(eta) > CLIP))
        e = xhat * np.exp(-np.clip(eta, -CLIP, CLIP))
    if clipped:
        warnings.warn(f"{clipped} linear predictors clipped at +-{CLIP:g}", RuntimeWarning,
                      stacklevel=2)
    return float(np.sum(-eta - e)), _grad_blocks(design, e - 1.0)


# --------------------------------------------------------------------------
# augmented Lagrangian


@dataclass(frozen=True)
class AugLagState:
    """Settings and warm-start multipliers for :func:`auglag_solve`.

    ``ecm_tol``/``max_ecm`` control the outer expectation-maximisation loop
    of the estimators; the rest configure each constrained solve.
    """

    xi: np.ndarray | None = None
    zeta: float = 1.0
    inner_tol: float = 1e-8
    outer_tol: float = 1e-10
    max_outer: int = 60
    max_inner: int = 200
    zeta_growth: float = 10.0
    ecm_tol: float = 1e-7
    max_ecm: int = 200

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if self.zeta_growth < 1:
            raise ValueError("zeta_growth must be at least 1")
        if not (self.inner_tol > 0 and self.outer_tol > 0 and self.ecm_tol > 0):
            raise ValueError("tolerances must be positive")


def _modified_newton(fun, hess, x, max_iter, tol):
    """Minimise ``fun(x) -> (f, g)`` by Newton steps with a Hessian shift.

    Stops when ``|g|_inf <= tol * max(1, |g0|_inf)`` or when the Newton
    decrement reaches rounding level.
    """
    f, g = fun(x)
    gtol = tol * max(1.0, np.max(np.abs(g), initial=0.0))
    for it in range(max_iter):
        if np.max(np.abs(g), initial=0.0) <= gtol:
            return x, f, g, it, True
        H = hess(x)
        dmax = max(np.max(np.abs(np.diag(H)), initial=0.0), 1e-300)
        tau = 0.0
        eye = np.eye(len(x))
        while True:
            try:
                c = linalg.cho_factor(H + tau * eye)
                break
            except linalg.LinAlgError:
                tau = max(10 * tau, 1e-8 * dmax)
        d = -linalg.cho_solve(c, g)
        slope = g @ d
        if -slope <= 1e-22 * max(1.0, abs(f)):
            return x, f, g, it, True
        t = 1.0
        while True:
            xn = x + t * d
            fn, gn = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                break
            # near the optimum f changes below its rounding level; the
            # gradient is still accurate, so accept a step that reduces it
            if np.isfinite(fn) and fn <= f + 1e-12 * abs(f) \
                    and np.max(np.abs(gn)) < np.max(np.abs(g)):
                break
            t *= 0.5
            if t < 1e-12:
                if -slope <= 1e-14 * max(1.0, abs(f)):
                    return x, f, g, it, True
                raise StepSizeError(f"line search failed (slope {slope:.3g})")
        x, f, g = xn, fn, gn
    return x, f, g, max_iter, np.max(np.abs(g), initial=0.0) <= gtol


ZETA_MAX = 1e10


def auglag_solve(objective: Callable, constraint: Callable, state: AugLagState,
                 theta_init, *, hessian: Callable | None = None):
    """Minimise ``objective`` subject to ``constraint(theta) = 0``.

    Parameters
    ----------
    objective
        ``theta -> (f, grad)``.
    constraint
        ``theta -> (c, jacobian)`` with ``c`` already scaled.
    hessian
        Optional ``(theta, w) -> hess f + sum_r w_r hess c_r``. Without it the
        inner problems are solved by BFGS.

    The augmented Lagrangian is ``f - xi'c + zeta/2 |c|^2``; after each inner
    solve ``xi <- xi - zeta c``, so ``xi`` converges to the Lagrange
    multiplier of ``grad f = J' xi``. ``zeta`` grows by ``zeta_growth``
    whenever the residual fails to shrink by a factor of 4.

    Returns ``(theta, diagnostics)``.
    """
    theta = np.array(theta_init, float, ndmin=1)
    c0, _ = constraint(theta)
    xi = np.zeros(len(c0)) if state.xi is None else np.array(state.xi, float)
    zeta = float(state.zeta)
    prev = np.inf
    n_inner = 0
    converged = stationary = False
    r = np.inf
    outer = 0

    for outer in range(1, state.max_outer + 1):
        def lag(th, xi=xi, zeta=zeta):
            f, g = objective(th)
            c, J = constraint(th)
            w = zeta * c - xi
            return f - xi @ c + 0.5 * zeta * (c @ c), g + J.T @ w

        if hessian is None:
            res = optimize.minimize(lag, theta, jac=True, method="BFGS",
                                    options={"gtol": state.inner_tol, "maxiter": state.max_inner})
            theta, its = res.x, res.nit
            stationary = bool(np.max(np.abs(res.jac)) <= 10 * state.inner_tol)
        else:
            def lag_hess(th, xi=xi, zeta=zeta):
                c, J = constraint(th)
                return hessian(th, zeta * c - xi) + zeta * (J.T @ J)

            theta, _, _, its, stationary = _modified_newton(lag, lag_hess, theta,
                                                            state.max_inner, state.inner_tol)
        n_inner += its
        c, _ = constraint(theta)
        r = float(np.max(np.abs(c), initial=0.0))
        xi = xi - zeta * c
        if r <= state.outer_tol:
            if stationary:
                converged = True
                break
        elif r > prev / 4:
            zeta = min(zeta * state.zeta_growth, ZETA_MAX)
        prev = r
    return theta, {"converged": converged, "outer_iterations": outer, "inner_iterations": n_inner,
                   "residual": r, "xi": xi, "zeta": zeta, "stationary": stationary}


# --------------------------------------------------------------------------
# the log-linear engine shared with the random-effects fit


class _Engine:
    """Log-linear mean ``mu = exp(W phi)`` on a reduced problem.

    Without a penalty ``phi`` are coordinates in an orthonormal basis of the
    design's row space, which removes the gauge freedom. With a penalty
    matrix ``K`` the raw (internal) coefficients are used and the penalty
    ``phi' K phi / 2`` identifies them.
    """

    def __init__(self, problem: ReducedProblem, X: np.ndarray, K: np.ndarray | None = None):
        self.problem = problem
        self.A, self.y, self.s = problem.A, problem.y, problem.scale
        # each margin's residual is measured relative to the margin itself,
        # which keeps the penalty balanced when margins span magnitudes
        self.w = 1.0 / problem.y
        self.rows = problem.cell_rows
        self.K = K
        if K is None:
            u, sv, vt = np.linalg.svd(X, full_matrices=False)
            r = int(np.sum(sv > 1e-10 * sv[0])) if len(sv) else 0
            self.P = vt[:r].T
            self.W = u[:, :r] * sv[:r]
            self._to_phi = u[:, :r].T / sv[:r, None]
        else:
            self.P = np.eye(X.shape[1])
            self.W = X
            self._to_phi = np.linalg.pinv(X)
        self.clipped = 0

    def eta(self, phi):
        eta = self.W @ phi
        big = np.abs(eta) > CLIP
        if big.any():
            self.clipped += int(big.sum())
            eta = np.clip(eta, -CLIP, CLIP)
        return eta

    def mu(self, phi):
        return np.exp(self.eta(phi))

    def phi_from_eta(self, eta):
        return self._to_phi @ eta

    def residual(self, phi) -> float:
        return float(np.max(np.abs(self.A @ self.mu(phi) - self.y))) / self.s

    # -- saddlepoint pieces ------------------------------------------------
    def _spectral(self, mu):
        S = (self.A * mu**2) @ self.A.T
        ev, Q = np.linalg.eigh(S)
        ok = ev > 1e-12 * ev[-1]
        return ev[ok], Q[:, ok]

    def loglik_sp(self, phi) -> float:
        """``-1/2 log pdet(A diag(mu)^2 A')`` at a feasible point."""
        ev, _ = self._spectral(self.mu(phi))
        return -0.5 * float(np.sum(np.log(ev)))

    def expected_flows(self, phi) -> np.ndarray:
        """Second-order approximation of ``E[x | A x = A mu]``."""
        mu = self.mu(phi)
        ev, Q = self._spectral(mu)
        Sp = (Q / ev) @ Q.T
        sr, rr = self.rows
        w = Sp[sr, sr] + Sp[rr, rr] + 2 * Sp[sr, rr]
        v = w * mu**3
        u = Sp @ (self.A @ v)
        return mu - (v - mu**2 * (u[sr] + u[rr]))

    # -- constrained maximisation of Q --------------------------------------
    def m_step(self, phi, xhat, state: AugLagState):
        W, A, y, K = self.W, self.A, self.y, self.K
        Aw = A * self.w[:, None]

        def objective(p):
            eta = self.eta(p)
            t = xhat * np.exp(-eta)
            f = float(np.sum(eta + t))
            g = W.T @ (1.0 - t)
            if K is not None:
                Kp = K @ p
                f += 0.5 * p @ Kp
                g = g + Kp
            return f, g

        def constraint(p):
            mu = self.mu(p)
            return Aw @ mu - 1.0, (Aw * mu) @ W

        def hessian(p, wts):
            eta = self.eta(p)
            mu = np.exp(eta)
            d = xhat * np.exp(-eta) + mu * (Aw.T @ wts)
            H = (W.T * d) @ W
            return H if K is None else H + K

        with np.errstate(over="ignore", invalid="ignore"):
            return auglag_solve(objective, constraint, state, phi, hessian=hessian)


def _squarem_ecm(engine: _Engine, phi0, state: AugLagState, to_theta: Callable,
                 first_xhat=None):
    """Expectation/constrained-maximisation iteration accelerated by SQUAREM.

    Intermediate maximisation steps are solved to a feasibility tolerance
    proportional to the last coefficient change; the final ones to
    ``state.outer_tol``. An extrapolated step is kept only if it does not
    lower the saddlepoint log-likelihood of the margins, which is also the
    tracked objective. Returns ``(phi, info)``.
    """
    ms = {"state": state, "m_steps": 0, "failures": 0, "tol": state.outer_tol}

    def G(p, xhat=None):
        xh = engine.expected_flows(p) if xhat is None else xhat
        try:
            out, info = engine.m_step(p, xh, replace(ms["state"], outer_tol=ms["tol"]))
        except StepSizeError as exc:
            ms["failures"] += 1
            log.debug("m-step failed: %s", exc)
            return None
        ms["m_steps"] += 1
        ms["state"] = replace(ms["state"], xi=info["xi"], zeta=info["zeta"])
        if not info["converged"]:
            ms["failures"] += 1
            return None
        return out

    def done(gap):
        """Whether ``gap`` ends the loop; otherwise adapt the M-step tolerance."""
        final = ms["tol"] <= state.outer_tol
        ms["tol"] = max(state.outer_tol, min(1e-6, 1e-3 * gap))
        return gap <= state.ecm_tol and final

    ms["tol"] = 1e-6
    p = G(phi0, first_xhat if first_xhat is not None else engine.mu(phi0))
    if p is None:
        return phi0, {"converged": False, "iterations": 0, "trace": (), "m_steps": ms["m_steps"],
                      "failures": ms["failures"], "state": ms["state"]}
    th = to_theta(p)
    trace = [engine.loglik_sp(p)]
    step_max = 4.0
    converged = False
    k = 0
    while k < state.max_ecm:
        k += 1
        p1 = G(p)
        if p1 is None:
            break
        th1 = to_theta(p1)
        if done(np.max(np.abs(th1 - th))):
            p, th, converged = p1, th1, True
            trace.append(engine.loglik_sp(p))
            break
        p2 = G(p1)
        if p2 is None:
            p, th = p1, th1
            trace.append(engine.loglik_sp(p))
            break
        th2 = to_theta(p2)
        if done(np.max(np.abs(th2 - th1))):
            p, th, converged = p2, th2, True
            trace.append(engine.loglik_sp(p))
            break
        r = p1 - p
        v = (p2 - p1) - r
        nv = np.linalg.norm(v)
        alpha = -np.linalg.norm(r) / nv if nv > 0 else -1.0
        alpha = max(min(alpha, -1.0), -step_max)
        l2 = engine.loglik_sp(p2)
        cand = None
        if alpha < -1.0:
            cand = G(p - 2 * alpha * r + alpha**2 * v)
        if cand is not None:
            lc = engine.loglik_sp(cand)
            if lc >= l2 - 1e-12 * max(1.0, abs(l2)):
                th_c = to_theta(cand)
                done(np.max(np.abs(th_c - th2)))
                p, th = cand, th_c
                trace.append(lc)
                if alpha == -step_max:
                    step_max *= 2
                continue
            step_max = max(1.0, step_max / 2)
        p, th = p2, th2
        trace.append(l2)
    return p, {"converged": converged, "iterations": k, "trace": tuple(trace),
               "m_steps": ms["m_steps"], "failures": ms["failures"], "state": ms["state"]}


def _fixed_internal(design: DesignMatrices) -> np.ndarray:
    return np.column_stack([np.ones(design.N), design.indicator_block(), design.standardized()])


def _fixed_theta(design: DesignMatrices, theta_std: np.ndarray) -> Theta:
    """Map internal coefficients ``[c0, indicators, beta_std]`` to a normalised Theta."""
    n, ri = design.n, design.row_index
    flags = []
    if design.spec.include_sender_effects:
        flags.append(ri < n)
    if design.spec.include_receiver_effects:
        flags.append(ri >= n)
    used = ri[np.any(flags, axis=0)] if flags else ri[:0]
    m = len(used)
    c0, ind, bstd = theta_std[0], theta_std[1:1 + m], theta_std[1 + m:]
    beta = np.zeros(design.l)
    beta[design.keep] = bstd / design.scale[design.keep]
    const = c0 - beta @ design.center
    delta, gamma = np.zeros(n), np.zeros(n)
    snd, rcv = used < n, used >= n
    if snd.any():
        a = ind[snd]
        const += a.mean()
        delta[used[snd]] = a - a.mean()
    if rcv.any():
        b = ind[rcv]
        const += b.mean()
        gamma[used[rcv] - n] = b - b.mean()
    return Theta(delta, gamma, beta, const, design.names)


def _gravity(problem: ReducedProblem) -> np.ndarray:
    y, n = problem.full_margins(), problem.n
    total = y[:n].sum()
    return y[problem.senders] * y[n + problem.receivers] / total


def initialize_theta(problem: ReducedProblem, design: DesignMatrices) -> Theta:
    """Least-squares fit of the log gravity matrix on the design.

    Collinear exogenous columns were removed when the design was built and
    keep a zero coefficient.
    """
    design.check(problem)
    eng = _Engine(problem, _fixed_internal(design))
    phi = eng.phi_from_eta(np.log(_gravity(problem)))
    return _fixed_theta(design, eng.P @ phi)


def fit_constrained_ml(problem: ReducedProblem, design: DesignMatrices,
                       config: AugLagState | None = None, *,
                       theta0: Theta | None = None) -> FitResult:
    """Log-linear constrained maximum-likelihood fit of the cell means.

    Starts from :func:`initialize_theta` (or ``theta0``), then alternates
    expectation steps and augmented-Lagrangian maximisation steps until the
    coefficients move less than ``config.ecm_tol`` at a feasible point. The
    first maximisation uses ``mu(theta0)`` as the expected flows; later ones
    use a saddlepoint approximation of the conditional mean of the flows
    given the margins, which keeps the expected margins equal to ``y``.
    Without covariates the feasible set inside the family is a single point
    and the loop stops after one step.
    """
    cfg = config or AugLagState()
    design.check(problem)
    if problem.N == 0:
        return FitResult(np.zeros(0), "regression", True, 0, 0.0, theta=Theta.zeros(design))
    eng = _Engine(problem, _fixed_internal(design))
    start = theta0 if theta0 is not None else initialize_theta(problem, design)
    phi0 = eng.phi_from_eta(design.linear_predictor(start))

    def to_theta(p):
        return _fixed_theta(design, eng.P @ p).vector()

    phi, info = _squarem_ecm(eng, phi0, cfg, to_theta)
    mu = eng.mu(phi)
    res = problem.max_residual(mu)
    feasible = res <= cfg.outer_tol * problem.scale
    converged = bool(info["converged"] and feasible)
    if not converged:
        log.warning("constrained ML fit did not converge (residual %.3g)", res)
    return FitResult(
        mu, "regression", converged, info["iterations"], res,
        theta=_fixed_theta(design, eng.P @ phi), trace=info["trace"],
        diagnostics={"m_steps": info["m_steps"], "failures": info["failures"],
                     "xi": info["state"].xi, "clipped": eng.clipped,
                     "dropped_covariates": design.dropped})


def predict(fit: FitResult, problem: ReducedProblem):
    """Fitted means on the original cells, exact zeros for dropped cells."""
    return problem.recompose(fit.mu)


def cross_family_deviation(fit_a: FitResult, fit_b: FitResult, problem: ReducedProblem) -> float:
    """``||mu_a - mu_b||_inf / ||y||_inf`` between two fits of one problem."""
    if problem.N == 0:
        return 0.0
    return float(np.max(np.abs(fit_a.mu - fit_b.mu))) / problem.scale
