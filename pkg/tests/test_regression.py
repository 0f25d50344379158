import warnings

import numpy as np
import pytest

from netrecon.core import FlowMatrix, NodeSet, apply_margins, build_routing_matrix, reduce_problem
from netrecon.ipfp import fit_ipfp
from netrecon.regression import (
    AugLagState,
    Covariate,
    ModelSpec,
    StepSizeError,
    Theta,
    auglag_solve,
    build_design,
    cross_family_deviation,
    fit_constrained_ml,
    initialize_theta,
    predict,
    q_function,
)

from conftest import problem_from_sums, random_instance, relerr

DYAD = ModelSpec((Covariate("z", "dyadic"),))


def _z_from_list(n, values):
    z = np.zeros((n, n))
    for (a, b), v in zip(NodeSet.of_size(n).off_diagonal(), values):
        z[int(a) - 1, int(b) - 1] = v
    return z


# -- design -----------------------------------------------------------------

def test_design_indicators_n3():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    d = build_design(p, ModelSpec(), {})
    assert d.Z.shape == (6, 6)
    np.testing.assert_array_equal(d.Z[0], [1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(d.Z.sum(axis=1), 2)


def test_design_log_of_e_is_ones():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    spec = ModelSpec((Covariate("c", "dyadic", "log"),))
    with pytest.warns(UserWarning, match="collinear"):
        d = build_design(p, spec, {"c": np.full((3, 3), np.e)})
    np.testing.assert_allclose(d.Ztilde[:, 0], 1.0, atol=1e-15)
    assert d.dropped == ("c",)


def test_design_nodal_sender_expansion():
    p = problem_from_sums([1, 2, 3], [3, 2, 1])
    g = np.array([5.0, 7.0, 11.0])
    with pytest.warns(UserWarning):
        d = build_design(p, ModelSpec((Covariate("g", "nodal-sender"),)), {"g": g})
    np.testing.assert_array_equal(d.Ztilde[:, 0], g[p.senders])


def test_design_mapping_input_and_missing_cells():
    p = problem_from_sums([1, 2, 3], [3, 2, 1])
    data = {c: 1.0 + k for k, c in enumerate(p.original.routing.cells)}
    d = build_design(p, DYAD, {"z": data})
    np.testing.assert_array_equal(d.Ztilde[:, 0], np.arange(1.0, 7.0))
    del data[("2", "3")]
    with pytest.raises(ValueError, match=r"\('2', '3'\)"):
        build_design(p, DYAD, {"z": data})


def test_design_log_rejects_nonpositive():
    p = problem_from_sums([1, 2, 3], [3, 2, 1])
    spec = ModelSpec((Covariate("c", "dyadic", "log"),))
    with pytest.raises(ValueError, match="positive"):
        build_design(p, spec, {"c": np.zeros((3, 3))})


def test_spec_validation():
    with pytest.raises(ValueError):
        Covariate("a", "weird")
    with pytest.raises(ValueError):
        Covariate("a", "dyadic", "sqrt")
    with pytest.raises(ValueError, match="unique"):
        ModelSpec((Covariate("a", "dyadic"), Covariate("a", "dyadic")))
    p = problem_from_sums([1, 2, 3], [3, 2, 1])
    with pytest.raises(ValueError, match="no data"):
        build_design(p, DYAD, {})


# -- expected log-likelihood ------------------------------------------------

def _setup(seed=0, n=4, beta=0.5):
    rng = np.random.default_rng(seed)
    p, x, z = random_instance(n, rng, beta)
    return p, build_design(p, DYAD, {"z": z}), rng


def test_q_at_theta0():
    p, d, rng = _setup()
    th0 = Theta.from_vector(rng.normal(size=2 * d.n + 2), d.n)
    val, grad = q_function(th0, th0, d)
    assert val == pytest.approx(np.sum(-d.linear_predictor(th0) - 1), rel=1e-14)
    np.testing.assert_allclose(grad, 0, atol=1e-12)


def test_q_single_cell():
    p = problem_from_sums([5, 0], [0, 5])
    d = build_design(p, ModelSpec(), {})
    th0 = Theta.zeros(d)
    th = Theta(np.zeros(2), np.zeros(2), [], np.log(2.0))
    val, _ = q_function(th, th0, d)
    assert val == pytest.approx(-np.log(2) - 0.5, abs=1e-15)


def test_q_gradient_finite_differences():
    p, d, rng = _setup(1)
    for _ in range(20):
        v = rng.normal(size=2 * d.n + 2) * 0.5
        v0 = rng.normal(size=2 * d.n + 2) * 0.5
        th0 = Theta.from_vector(v0, d.n)
        _, g = q_function(Theta.from_vector(v, d.n), th0, d)
        h = 1e-6
        fd = np.array([(q_function(Theta.from_vector(v + h * e, d.n), th0, d)[0]
                        - q_function(Theta.from_vector(v - h * e, d.n), th0, d)[0]) / (2 * h)
                       for e in np.eye(len(v))])
        assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_q_stationary_at_feasible_point():
    p, d, _ = _setup(2)
    fit = fit_constrained_ml(p, d)
    _, g = q_function(fit.theta, fit.theta, d)
    np.testing.assert_array_equal(g, 0.0)


def test_q_clipping_warns():
    p, d, _ = _setup(3)
    th0 = Theta.zeros(d)
    big = Theta(np.zeros(d.n), np.zeros(d.n), [0.0], 800.0)
    with pytest.warns(RuntimeWarning, match="clipped"):
        val, _ = q_function(big, th0, d)
    assert np.isfinite(val)


# -- augmented Lagrangian ---------------------------------------------------

def test_auglag_scalar_kkt():
    obj = lambda t: ((t[0] - 2) ** 2, np.array([2 * (t[0] - 2)]))
    con = lambda t: (np.array([t[0] - 1]), np.array([[1.0]]))
    hess = lambda t, w: np.array([[2.0]])
    for h in (None, hess):
        th, info = auglag_solve(obj, con, AugLagState(), [0.0], hessian=h)
        assert info["converged"]
        assert th[0] == pytest.approx(1.0, abs=1e-8)
        assert info["xi"][0] == pytest.approx(-2.0, abs=1e-6)


def test_auglag_symmetric():
    obj = lambda t: (t @ t, 2 * t)
    con = lambda t: (np.array([t.sum() - 2]), np.ones((1, 2)))
    th, info = auglag_solve(obj, con, AugLagState(), [3.0, -1.0], hessian=lambda t, w: 2 * np.eye(2))
    np.testing.assert_allclose(th, [1, 1], atol=1e-8)


def test_auglag_penalty_oracle(golden):
    g = golden["mstep_n3"]
    X, A, y, xh = (np.array(g[k]) for k in ("X", "A", "y", "xhat"))

    def obj(th):
        eta = X @ th
        return float(np.sum(eta + xh * np.exp(-eta))), X.T @ (1 - xh * np.exp(-eta))

    def con(th):
        mu = np.exp(X @ th)
        return A @ mu / y - 1, (A * mu) / y[:, None] @ X

    def hess(th, w):
        eta = X @ th
        mu = np.exp(eta)
        return (X.T * (xh * np.exp(-eta))) @ X + (X.T * (mu * (A.T @ (w / y)))) @ X

    th0 = np.linalg.lstsq(X, np.log(xh), rcond=None)[0]
    th, info = auglag_solve(obj, con, AugLagState(), th0, hessian=hess)
    assert info["converged"]
    assert relerr(np.exp(X @ th), g["mu"]) < 1e-5


def test_auglag_outer_cap_flags():
    obj = lambda t: ((t[0] - 2) ** 2, np.array([2 * (t[0] - 2)]))
    con = lambda t: (np.array([t[0] - 1]), np.array([[1.0]]))
    th, info = auglag_solve(obj, con, AugLagState(max_outer=1, zeta=1e-3), [0.0],
                            hessian=lambda t, w: np.array([[2.0]]))
    assert not info["converged"]


def test_auglag_unbounded_step():
    # f is unbounded below along the constraint-free direction
    obj = lambda t: (-t[1] ** 3, np.array([0.0, -3 * t[1] ** 2]))
    con = lambda t: (np.array([t[0]]), np.array([[1.0, 0.0]]))
    with pytest.raises(StepSizeError), np.errstate(over="ignore", invalid="ignore"):
        auglag_solve(obj, con, AugLagState(), [0.0, 1.0],
                     hessian=lambda t, w: np.array([[0.0, 0], [0, -6 * t[1]]]))


# -- initialisation ---------------------------------------------------------

def test_init_no_covariates_is_log_gravity():
    p = problem_from_sums([10, 5, 3], [6, 8, 4])
    d = build_design(p, ModelSpec(), {})
    th = initialize_theta(p, d)
    y = p.y
    grav = y[p.senders] * y[3 + p.receivers] / y[:3].sum()
    np.testing.assert_allclose(d.linear_predictor(th), np.log(grav), atol=1e-12)
    np.testing.assert_allclose(np.diff(th.delta), np.diff(np.log(y[:3])), atol=1e-12)


def test_init_zero_covariate():
    p = problem_from_sums([10, 5, 3], [6, 8, 4])
    with pytest.warns(UserWarning):
        d = build_design(p, DYAD, {"z": np.zeros((3, 3))})
    assert initialize_theta(p, d).beta[0] == 0.0


def test_init_normal_equations_oracle(golden):
    g = golden["init_n3"]
    p = problem_from_sums(g["rows"], g["cols"])
    d = build_design(p, DYAD, {"z": _z_from_list(3, g["z"])})
    th = initialize_theta(p, d)
    assert th.beta[0] == pytest.approx(g["beta"], abs=1e-12)
    np.testing.assert_allclose(d.linear_predictor(th), g["eta"], atol=1e-12)


# -- fits -------------------------------------------------------------------

def test_fit_n2_unique_point():
    p = problem_from_sums([3, 5], [5, 3])
    with pytest.warns(UserWarning):
        d = build_design(p, DYAD, {"z": np.array([[0, 1.0], [-1.0, 0]])})
    fit = fit_constrained_ml(p, d)
    np.testing.assert_allclose(fit.mu, [3, 5], atol=1e-10)


def test_fit_n3_symmetric():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    fit = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
    assert fit.converged
    np.testing.assert_allclose(fit.mu, 1.0, atol=1e-10)


def test_fit_moment_condition_and_theta():
    p, d, _ = _setup(4, n=6, beta=1.0)
    fit = fit_constrained_ml(p, d)
    assert fit.converged
    assert fit.residual <= 1e-10 * p.scale
    np.testing.assert_allclose(np.exp(d.linear_predictor(fit.theta)), fit.mu, rtol=1e-10)
    assert fit.theta.names == ("z",)
    assert fit.trace and np.all(np.isfinite(fit.trace))


def test_fit_no_covariates_single_step():
    p, x, _ = random_instance(6, np.random.default_rng(8))
    fit = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
    assert fit.converged
    assert fit.residual <= 1e-6 * p.scale


def test_nodal_covariates_collapse():
    rng = np.random.default_rng(9)
    for n in (3, 5, 8):
        p, *_ = random_instance(n, rng)
        base = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
        spec = ModelSpec((Covariate("g", "nodal-sender", "log"), Covariate("h", "nodal-receiver")))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            d = build_design(p, spec, {"g": rng.uniform(1, 5, n), "h": rng.normal(size=n)})
        fit = fit_constrained_ml(p, d)
        assert relerr(fit.mu, base.mu) < 1e-4


def test_cross_family_deviation_reported():
    p, x, _ = random_instance(5, np.random.default_rng(10))
    a = fit_ipfp(p)
    b = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
    dev = cross_family_deviation(a, b, p)
    assert np.isfinite(dev) and dev >= 0
    print(f"cross-family deviation n=5: {dev:.3e}")


def test_predict_roundtrip_and_dropped():
    # unique interior solution x21=4, x31=1, x32=5
    p = problem_from_sums([0, 4, 6], [5, 5, 0])
    fit = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
    full = predict(fit, p)
    assert full.N == 6
    dropped = np.zeros(6, bool)
    dropped[p.dropped_cells] = True
    assert np.all(full.values[dropped] == 0)
    y = apply_margins(p.original.routing, full).y
    np.testing.assert_allclose(y, p.original.y, atol=1e-8)


def test_predict_identity_on_full_problem():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    fit = fit_constrained_ml(p, build_design(p, ModelSpec(), {}))
    np.testing.assert_array_equal(predict(fit, p).values, fit.mu)


def test_design_must_match_problem():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    q = problem_from_sums([0, 4, 4], [4, 4, 0])
    with pytest.raises(ValueError, match="does not match"):
        fit_constrained_ml(q, build_design(p, ModelSpec(), {}))


def test_covariate_helps_when_strong():
    rng = np.random.default_rng(21)
    wins = 0
    for _ in range(15):
        nodes = NodeSet.of_size(8)
        d_, g_, z = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(8, 8))
        x = FlowMatrix.from_dense(nodes, rng.exponential(np.exp(d_[:, None] + g_ + 2 * z)))
        p = reduce_problem(apply_margins(build_routing_matrix(nodes), x))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reg = fit_constrained_ml(p, build_design(p, DYAD, {"z": z}))
        ip = fit_ipfp(p)
        xv = x.values[p.cell_map]
        wins += np.sum((xv - ip.mu) ** 2) > np.sum((xv - reg.mu) ** 2)
    assert wins >= 10
