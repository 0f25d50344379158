import warnings

import numpy as np
import pytest

from netrecon.raneff import (
    VarianceComponents,
    _low_rank,
    estimate_variance,
    fit_random_effects,
    penalized_q,
    reml_loglik,
    reml_variance,
    sigma_matrix,
    working_response,
)
from netrecon.regression import Covariate, ModelSpec, Theta, build_design, fit_constrained_ml, q_function

from conftest import problem_from_sums, random_instance, relerr

DYAD = ModelSpec((Covariate("z", "dyadic"),))
HUGE = VarianceComponents(1e6, 1e6, 0.0)


def _setup(seed, n=5, beta=0.5):
    rng = np.random.default_rng(seed)
    p, x, z = random_instance(n, rng, beta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(p, DYAD, {"z": z})
    return p, d, z, rng


# -- variance components ----------------------------------------------------

def test_components_validation():
    with pytest.raises(ValueError):
        VarianceComponents(-1.0, 1.0)
    with pytest.raises(ValueError, match="semi-definite"):
        VarianceComponents(1.0, 1.0, 1.5)
    vc = VarianceComponents(4.0, 1.0, -1.0)
    assert vc.rho == pytest.approx(-0.5)
    back = VarianceComponents.from_params(vc.params())
    np.testing.assert_allclose(back.matrix, vc.matrix, rtol=1e-12)


def test_sigma_same_node_only():
    vc = VarianceComponents(2.0, 3.0, 0.5)
    S = sigma_matrix(vc, np.arange(6), 3)
    assert S[0, 3] == 0.5 and S[0, 4] == 0.0
    assert S[1, 1] == 2.0 and S[4, 4] == 3.0
    assert S[0, 1] == 0.0


# -- penalised objective ----------------------------------------------------

def test_penalty_vanishes_for_huge_variances():
    p, d, _, rng = _setup(0)
    big = VarianceComponents(1e12, 1e12, 0.0)
    for _ in range(5):
        th = Theta.from_vector(rng.normal(size=2 * d.n + 2), d.n, d.names)
        th0 = Theta.from_vector(rng.normal(size=2 * d.n + 2), d.n, d.names)
        assert penalized_q(th, th0, big, d)[0] == pytest.approx(q_function(th, th0, d)[0], abs=1e-9)


def test_penalty_zero_at_zero_effects():
    p, d, _, rng = _setup(1)
    th = Theta(np.zeros(d.n), np.zeros(d.n), [0.7], 0.3, d.names)
    th0 = Theta.from_vector(rng.normal(size=2 * d.n + 2), d.n, d.names)
    vc = VarianceComponents(0.5, 2.0, 0.4)
    assert penalized_q(th, th0, vc, d)[0] == q_function(th, th0, d)[0]


def test_penalized_gradient_finite_differences():
    p, d, _, rng = _setup(2)
    vc = VarianceComponents(0.8, 1.5, 0.3)
    for _ in range(20):
        v = rng.normal(size=2 * d.n + 2) * 0.5
        th0 = Theta.from_vector(rng.normal(size=2 * d.n + 2) * 0.5, d.n, d.names)
        _, g = penalized_q(Theta.from_vector(v, d.n, d.names), th0, vc, d)
        h = 1e-6
        fd = np.array([(penalized_q(Theta.from_vector(v + h * e, d.n, d.names), th0, vc, d)[0]
                        - penalized_q(Theta.from_vector(v - h * e, d.n, d.names), th0, vc, d)[0])
                       / (2 * h) for e in np.eye(len(v))])
        assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_singular_sigma_is_ridged():
    p, d, _, _ = _setup(3)
    th = Theta.zeros(d)
    with pytest.warns(RuntimeWarning, match="ridge"):
        val, _ = penalized_q(th, th, VarianceComponents(1.0, 1.0, 1.0), d)
    assert np.isfinite(val)


# -- restricted likelihood --------------------------------------------------

def test_reml_zero_components_identity_covariance():
    rng = np.random.default_rng(4)
    U = np.eye(6)
    X = rng.normal(size=(6, 2))
    y = rng.normal(size=6)
    G = _low_rank(VarianceComponents(0.0, 0.0), U, np.arange(6), 3)
    np.testing.assert_array_equal(G, 0.0)
    # with V = I the value is plain restricted least squares
    b = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ b
    expect = -0.5 * (np.linalg.slogdet(X.T @ X)[1] + r @ r)
    val, bhat = reml_loglik(VarianceComponents(0.0, 0.0), y, X, U, np.arange(6), 3)
    assert val == pytest.approx(expect, rel=1e-12)
    np.testing.assert_allclose(bhat, b, rtol=1e-10)


def test_reml_diagonal_determinant():
    # N=2, U=I, unit variances, rho=0: V = 2 I so log|V| = 2 log 2
    U = np.eye(2)
    vc = VarianceComponents(1.0, 1.0, 0.0)
    G = _low_rank(vc, U, np.arange(2), 1)
    assert np.linalg.slogdet(np.eye(2) + G @ G.T)[1] == pytest.approx(2 * np.log(2), abs=1e-15)
    # X = e1, y = 0: log|X'V^-1 X| = -log 2, quadratic term 0
    val, _ = reml_loglik(vc, np.zeros(2), np.array([[1.0], [0.0]]), U)
    assert val == pytest.approx(-0.5 * (2 * np.log(2) - np.log(2)), abs=1e-15)


def test_reml_matches_dense_formula():
    p, d, _, rng = _setup(5, n=4)
    X = np.column_stack([np.ones(d.N), d.Ztilde])
    y = rng.normal(size=d.N)
    vc = VarianceComponents(0.7, 1.3, -0.4)
    V = np.eye(d.N) + d.U @ sigma_matrix(vc, d.row_index, d.n) @ d.U.T
    Vi = np.linalg.inv(V)
    b = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    r = y - X @ b
    dense = -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(X.T @ Vi @ X)[1] + r @ Vi @ r)
    val, bhat = reml_loglik(vc, y, X, d.U, d.row_index, d.n)
    assert val == pytest.approx(dense, rel=1e-10)
    np.testing.assert_allclose(bhat, b, rtol=1e-8)


def test_reml_monte_carlo_recovery():
    n = 15
    p = problem_from_sums(np.ones(n), np.ones(n))
    d = build_design(p, ModelSpec(), {})
    X = np.ones((d.N, 1))
    truth = VarianceComponents(1.0, 0.5, 0.3)
    L = np.linalg.cholesky(truth.matrix)
    rng = np.random.default_rng(6)
    est = []
    for _ in range(50):
        eff = rng.normal(size=(n, 2)) @ L.T
        u = np.concatenate([eff[:, 0], eff[:, 1]])[d.row_index]
        y = 2.0 + d.U @ u + rng.normal(size=d.N)
        vc, _ = estimate_variance(y, X, d.U, d.row_index, d.n)
        est.append([vc.sigma2_delta, vc.sigma2_gamma, vc.sigma_dg])
    med = np.median(est, axis=0)
    tv = np.array([truth.sigma2_delta, truth.sigma2_gamma, truth.sigma_dg])
    assert np.all(np.abs(med - tv) <= 0.5 * np.abs(tv)), med


def test_reml_boundary_flag():
    # no effect variation at all: the variances head for zero
    n = 6
    p = problem_from_sums(np.ones(n), np.ones(n))
    d = build_design(p, ModelSpec(), {})
    y = np.random.default_rng(7).normal(size=d.N) * 1e-3
    vc, info = estimate_variance(y, np.ones((d.N, 1)), d.U, d.row_index, d.n)
    assert info["boundary"]
    assert vc.sigma2_delta < 1e-3 and vc.sigma2_gamma < 1e-3


def test_working_response():
    np.testing.assert_allclose(working_response([1.0, 2.0], [1.0, 4.0]), [0.0, np.log(2) + 1])


def test_reml_variance_from_thetas():
    p, d, _, rng = _setup(8, n=6)
    fit = fit_constrained_ml(p, d)
    vc = reml_variance(fit.theta, fit.theta, d)
    assert vc.sigma2_delta > 0 and vc.sigma2_gamma > 0


# -- alternating fit --------------------------------------------------------

def test_fixed_huge_components_match_fixed_effects():
    for seed in range(3):
        p, d, *_ = _setup(10 + seed, n=8)
        re = fit_random_effects(p, d, vartheta=HUGE, fix_vartheta=True)
        fe = fit_constrained_ml(p, d)
        assert fe.converged
        assert relerr(re.mu, fe.mu) < 1e-3


def test_n3_symmetric_is_one():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    fit = fit_random_effects(p, build_design(p, ModelSpec(), {}))
    np.testing.assert_allclose(fit.mu, 1.0, atol=1e-10)
    assert fit.vartheta is not None


def test_n2_unique_point():
    p = problem_from_sums([3, 5], [5, 3])
    fit = fit_random_effects(p, build_design(p, ModelSpec(), {}))
    np.testing.assert_allclose(fit.mu, [3, 5], atol=1e-10)


def test_no_covariates_same_predictions():
    rng = np.random.default_rng(13)
    for n in (4, 6, 8):
        p, *_ = random_instance(n, rng)
        d = build_design(p, ModelSpec(), {})
        assert relerr(fit_random_effects(p, d).mu, fit_constrained_ml(p, d).mu) < 1e-3


def test_moment_condition_and_reml_trace():
    p, d, *_ = _setup(14, n=7, beta=1.0)
    fit = fit_random_effects(p, d)
    assert fit.converged
    assert fit.residual <= 1e-6 * p.scale
    for old, new in fit.diagnostics["reml_trace"]:
        assert new >= old - 1e-10 * max(1.0, abs(old))


def test_swap_senders_and_receivers():
    rng = np.random.default_rng(15)
    n = 6
    d_, g_, z = 1.2 * rng.normal(size=n), 0.4 * rng.normal(size=n), rng.normal(size=(n, n))
    m = rng.exponential(np.exp(d_[:, None] + g_ + 0.5 * z))
    np.fill_diagonal(m, 0)
    a = problem_from_sums(m.sum(1), m.sum(0))
    b = problem_from_sums(m.sum(0), m.sum(1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fa = fit_random_effects(a, build_design(a, DYAD, {"z": z}))
        fb = fit_random_effects(b, build_design(b, DYAD, {"z": z.T}))
    va, vb = fa.vartheta, fb.vartheta
    assert vb.sigma2_delta == pytest.approx(va.sigma2_gamma, rel=1e-3)
    assert vb.sigma2_gamma == pytest.approx(va.sigma2_delta, rel=1e-3)


def test_shrinkage_monotone_in_variance():
    p, d, *_ = _setup(3, n=6, beta=1.0)
    norms = []
    for s in (1.0, 0.1, 0.01, 1e-3):
        f = fit_random_effects(p, d, vartheta=VarianceComponents(s, s, 0.0), fix_vartheta=True)
        assert f.converged
        norms.append(np.max(np.abs(np.r_[f.theta.delta, f.theta.gamma])))
    # the margins pin the effects, so the sup norm decreases but stays away from 0
    assert np.all(np.diff(norms) <= 1e-9)


def test_requires_both_effect_blocks():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    d = build_design(p, ModelSpec(include_receiver_effects=False), {})
    with pytest.raises(ValueError, match="both"):
        fit_random_effects(p, d)
    with pytest.raises(ValueError, match="fix_vartheta"):
        fit_random_effects(p, build_design(p, ModelSpec(), {}), fix_vartheta=True)
