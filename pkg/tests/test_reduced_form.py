
import numpy as np
import pytest
from scipy import optimize
from scipy.special import expit

from dopl.errors import EstimationError
from dopl.model import PanelDataset, Params
from dopl.moments import enumerate_indices, moment_general
from dopl.oracle import all_paths
from dopl.paramspace import ParamSpace
from dopl.reduced_form import (
    efficient_instruments,
    fit_ordered_logit,
    moment_path_jacobian,
    optimal_instrument,
    ordered_logit_mle,
    period_design,
)
from dopl.simulate import DgpConfig, gen_panel


def _ordered_sample(rng, n, b, tau):
    Z = rng.normal(size=(n, len(b)))
    ystar = Z @ b + rng.logistic(size=n)
    return 1 + (ystar[:, None] > tau).sum(axis=1), Z


def _negloglik(par, y, Z, Q):
    k = Z.shape[1]
    b, tau = par[:k], np.sort(par[k:])
    ext = np.concatenate([[-np.inf], tau, [np.inf]])
    eta = Z @ b
    p = expit(ext[y] - eta) - expit(ext[y - 1] - eta)
    return -np.sum(np.log(np.clip(p, 1e-300, None)))


def test_newton_mle_matches_generic_optimizer(rng):
    y, Z = _ordered_sample(rng, 3000, np.array([0.8, -0.4]), np.array([-1.0, 0.5, 1.5]))
    fit = fit_ordered_logit(y, Z, 4)
    ref = optimize.minimize(_negloglik, np.concatenate([fit.b, fit.tau]) + 0.1, args=(y, Z, 4),
                            method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": 20000})
    assert fit.loglik == pytest.approx(-ref.fun, abs=1e-5)
    assert np.concatenate([fit.b, fit.tau]) == pytest.approx(ref.x, abs=1e-3)
    assert fit.grad_norm < 1e-6


def test_mle_is_close_to_truth_in_large_sample(rng):
    y, Z = _ordered_sample(rng, 40000, np.array([1.0]), np.array([-0.5, 0.7]))
    fit = fit_ordered_logit(y, Z, 3)
    assert fit.b == pytest.approx([1.0], abs=0.05)
    assert fit.tau == pytest.approx([-0.5, 0.7], abs=0.05)


def test_thresholds_only_fit_matches_cumulative_frequencies(rng):
    y = rng.integers(1, 4, 500)
    fit = fit_ordered_logit(y, np.zeros((500, 0)), 3)
    cum = np.cumsum(np.bincount(y, minlength=4)[1:])[:-1] / 500
    assert expit(fit.tau) == pytest.approx(cum, abs=1e-8)


def test_unobserved_level_is_an_error():
    with pytest.raises(EstimationError, match="never observed"):
        fit_ordered_logit(np.array([1, 1, 3, 3]), np.zeros((4, 0)), 3)


def test_period_design_layout():
    hist = np.array([[1, 3], [2, 2]])
    Z = period_design(hist, np.array([[0.5], [1.5]]), np.array([[1.0], [2.0]]), 3)
    # lag 0 dummies (2,3), lag 1 dummies (2,3), x_t, x_bar
    assert Z.tolist() == [[0, 0, 0, 1, 0.5, 1.0], [1, 0, 1, 0, 1.5, 2.0]]


@pytest.fixture(scope="module")
def small_panel():
    p = Params([0.8], [0.0, -0.6, 0.4], [-1.0, 1.0])
    return gen_panel(DgpConfig(600, 3, p, heterogeneity="normal:0,1", seed=21))


def test_path_laws_sum_to_one_and_match_single_units(small_panel):
    rf = ordered_logit_mle(small_panel, "per_period")
    laws = rf.path_laws(small_panel.y0[:5], small_panel.x[:5])
    assert laws.sum(axis=1) == pytest.approx(np.ones(5), abs=1e-12)
    for i in range(5):
        assert rf.path_law(small_panel.y0[i], small_panel.x[i]) == pytest.approx(laws[i], abs=1e-15)


def test_path_law_is_product_of_transitions(small_panel):
    rf = ordered_logit_mle(small_panel, "per_period")
    x = small_panel.x[0]
    law = rf.path_law(2, x)
    xb = x.mean(axis=0, keepdims=True)
    for k, path in enumerate(all_paths(3, 3)):
        full = (2,) + tuple(path)
        p = 1.0
        for t in range(1, 4):
            p *= rf.transition(t, np.array([full[:t]]), x[t - 1][None], xb)[0, full[t] - 1]
        assert law[k] == pytest.approx(p, rel=1e-12)


def test_pooled_thresholds_design(small_panel):
    rf = ordered_logit_mle(small_panel, "thresholds")
    assert rf.thresholds.shape == (2,)
    assert rf.path_law(1, small_panel.x[0]).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ordered_logit_mle(small_panel, "bogus")


def test_optimal_instrument_matches_direct_formula(rng):
    S, L, p = 7, 3, 2
    probs = rng.dirichlet(np.ones(S))
    m = rng.normal(size=(S, L))
    dm = rng.normal(size=(S, L, p))
    mean = probs @ m
    V = sum(probs[s] * np.outer(m[s] - mean, m[s] - mean) for s in range(S))
    V = V + 1e-8 * np.trace(V) / L * np.eye(L)
    J = sum(probs[s] * dm[s] for s in range(S))
    direct = J.T @ np.linalg.inv(V)
    assert optimal_instrument(probs, m, dm) == pytest.approx(direct, rel=1e-9)
    batched = optimal_instrument(np.stack([probs, probs]), np.stack([m, m]), np.stack([dm, dm]))
    assert batched.shape == (2, p, L)
    assert batched[1] == pytest.approx(direct, rel=1e-9)


def test_moment_path_jacobian_against_scalar_differences():
    params = Params([0.5], [0.0, 0.3, -0.4], [0.0, 1.1], gamma_norm=1, lambda_norm=1)
    space = ParamSpace.for_params(params)
    fam = enumerate_indices(3, 3, y0=2)
    paths = all_paths(3, 3)
    x = np.array([[0.1], [-0.3], [0.8]])
    m, dm = moment_path_jacobian(fam, 2, paths, x, params, space)
    theta = space.from_params(params)
    s, j, k = 13, 5, 2
    h = 1e-5
    up, dn = theta.copy(), theta.copy()
    up[k] += h
    dn[k] -= h
    f = lambda th: moment_general(fam[j], 2, paths[s], x, space.to_params(th))  # noqa: E731
    assert m[s, j] == pytest.approx(f(theta))
    assert dm[s, j, k] == pytest.approx((f(up) - f(dn)) / (2 * h), rel=1e-6, abs=1e-8)


def test_efficient_instruments_zero_outside_own_initial_condition(small_panel):
    params = Params([0.8], [0.0, -0.6, 0.4], [-1.0, 1.0]).normalized(1, 1)
    rf = ordered_logit_mle(small_panel, "per_period")
    fam = enumerate_indices(3, 3)
    A = efficient_instruments(small_panel.subset(np.arange(40)), rf, params, fam)
    assert A.shape == (40, 4, len(fam))
    y0 = small_panel.y0[:40]
    own = np.array([[f.y0 == v for f in fam] for v in y0])
    assert np.all(A[~np.repeat(own[:, None, :], 4, axis=1)] == 0)
    assert np.all(np.isfinite(A))


def test_efficient_instruments_chunking_is_invisible(small_panel):
    params = Params([0.8], [0.0, -0.6, 0.4], [-1.0, 1.0]).normalized(1, 1)
    rf = ordered_logit_mle(small_panel, "per_period")
    fam = enumerate_indices(3, 3)
    sub = small_panel.subset(np.arange(30))
    a = efficient_instruments(sub, rf, params, fam, chunk=7)
    b = efficient_instruments(sub, rf, params, fam, chunk=256)
    assert np.array_equal(a, b)


def test_per_period_requires_observed_levels():
    y = np.array([[1, 1, 1]] * 3 + [[2, 2, 2]] * 3)
    d = PanelDataset(np.array([1, 2, 1, 2, 1, 2]), y, np.zeros((6, 3, 1)), 3)
    with pytest.raises(EstimationError):
        ordered_logit_mle(d, "per_period")
