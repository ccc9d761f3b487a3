import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from literal import literal_t3

from conftest import random_params
from dopl.errors import SingularParameterError
from dopl.model import IndexSpec, Params
from dopl.moments import (
    FamilyEvaluator,
    MomentIndex,
    closed_form_count,
    enumerate_indices,
    interior_moment,
    moment_count,
    moment_general,
    moment_t3,
    rescale_tilde,
)
from dopl.oracle import all_paths, conditional_expectation


@pytest.mark.parametrize("Q", [2, 3, 4, 5])
def test_kernel_matches_literal_closed_forms(Q):
    rng = np.random.default_rng(Q)
    for _ in range(3):
        p = random_params(rng, Q, 2)
        x = rng.normal(size=(3, 2))
        family = enumerate_indices(Q, 3)
        paths = all_paths(Q, 3)
        for y0 in range(1, Q + 1):
            fam = [f for f in family if f.y0 == y0]
            ev = FamilyEvaluator(fam, np.full(len(paths), y0), paths, np.broadcast_to(x, (len(paths), 3, 2)), Q)
            vals = ev.values(p)
            ref = np.array([[literal_t3(y0, f.q1, f.q2, f.q3, y, x, p) for f in fam] for y in paths])
            assert vals == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_moment_t3_and_general_agree_bitwise(q3_params):
    x = np.array([[0.2, -0.3], [1.1, 0.4], [-0.6, 0.9]])
    for idx in enumerate_indices(3, 3):
        for y in all_paths(3, 3):
            assert moment_t3(idx, idx.y0, y, x, q3_params) == moment_general(idx, idx.y0, y, x, q3_params)


def test_moment_t3_rejects_other_periods(q3_params):
    idx = MomentIndex(1, 1, 1, 1, t=1, s=2, r=4)
    with pytest.raises(ValueError):
        moment_t3(idx, 1, [1, 1, 1, 1], np.zeros((4, 2)), q3_params)


def test_wrong_initial_condition_is_an_error(q3_params):
    with pytest.raises(ValueError):
        moment_general(MomentIndex(2, 1, 2, 1), 1, [1, 2, 1], np.zeros((3, 2)), q3_params)


def test_history_indicator_zeroes_other_histories():
    p = Params([0.5], [0.0, 0.4, -0.3], [-1.0, 1.0])
    idx = MomentIndex(1, 1, 2, 1, t=2, s=3, r=4, history=(3,))
    x = np.linspace(-1, 1, 4)[:, None]
    hit = [moment_general(idx, 1, (3,) + y, x, p) for y in itertools.product((1, 2, 3), repeat=3)]
    miss = [moment_general(idx, 1, (2,) + y, x, p) for y in itertools.product((1, 2, 3), repeat=3)]
    assert any(v != 0 for v in hit)
    assert all(v == 0 for v in miss)


@pytest.mark.parametrize("Q,T", [(2, 3), (3, 3), (3, 4), (2, 5)])
def test_conditional_mean_is_zero_for_every_fixed_effect(Q, T):
    rng = np.random.default_rng(7 * Q + T)
    p = random_params(rng, Q, 1)
    x = rng.normal(size=(T, 1))
    family = enumerate_indices(Q, T, boundary_gaps=True)
    for alpha in (-np.inf, -3.0, 0.0, 1.7, np.inf):
        for y0 in range(1, Q + 1):
            fam = [f for f in family if f.y0 == y0]
            assert np.max(np.abs(conditional_expectation(fam, y0, x, alpha, p))) < 1e-12


def test_moments_fail_under_wrong_parameters():
    p = Params([1.0], [-1.0, 0.0, 1.0], [-1.0, 1.0])
    wrong = Params([1.5], [-1.0, 0.0, 1.0], [-1.0, 1.0])
    x = np.array([[0.0], [1.0], [-0.5]])
    idx = MomentIndex(1, 1, 2, 1)
    truth = conditional_expectation(lambda paths: [moment_general(idx, 1, y, x, wrong) for y in paths], 1, x, 0.3, p)
    assert abs(truth) > 1e-3


def test_interacted_index_keeps_validity():
    p = Params([0.6], [0.2, -0.4, 0.5], [-0.7, 0.8], delta=[[0.1], [-0.3], [0.2]])
    x = np.array([[0.4], [-0.2], [0.9]])
    fam = enumerate_indices(3, 3, y0=2)
    for alpha in (-1.0, 0.5):
        m = conditional_expectation(fam, 2, x, alpha, p, IndexSpec.INTERACTED)
        assert np.max(np.abs(m)) < 1e-12


def test_counts_for_small_panels():
    assert [moment_count(Q, 3) for Q in (2, 3, 4, 5)] == [2, 12, 36, 80]
    assert moment_count(2, 4) == 8
    assert moment_count(3, 4) == 60
    assert moment_count(3, 3, static_model=True) == 27 - 3 * 2 - 1


@settings(max_examples=60, deadline=None)
@given(Q=st.integers(2, 9), T=st.integers(3, 8))
def test_summation_count_equals_plus_sign_closed_form(Q, T):
    assert moment_count(Q, T) == closed_form_count(Q, T, sign=+1)


@pytest.mark.parametrize("Q,T", [(2, 4), (3, 4), (3, 5), (4, 4)])
def test_minus_sign_closed_form_differs(Q, T):
    assert closed_form_count(Q, T, sign=-1) != moment_count(Q, T)


@settings(max_examples=30, deadline=None)
@given(Q=st.integers(2, 5), T=st.integers(3, 5))
def test_enumeration_size_matches_count(Q, T):
    fam = enumerate_indices(Q, T, y0=1)
    assert len(fam) == moment_count(Q, T)
    assert len(set(fam)) == len(fam)


def test_boundary_formulas_are_limits_of_interior_formula(rng):
    Q = 4
    for _ in range(20):
        p = random_params(rng, Q, 2)
        x = rng.normal(size=(3, 2))
        y0 = int(rng.integers(1, Q + 1))
        q1, q3 = int(rng.integers(1, Q)), int(rng.integers(1, Q))
        for y in all_paths(Q, 3):
            lo = MomentIndex(y0, q1, 1, q3)
            limit = rescale_tilde(interior_moment(lo, y0, y, x, p, outer=(-40.0, 40.0)), lo, y0, x, p)
            assert limit == pytest.approx(moment_general(lo, y0, y, x, p), rel=1e-8, abs=1e-8)
            hi = MomentIndex(y0, q1, Q, q3)
            limit = interior_moment(hi, y0, y, x, p, outer=(-40.0, 40.0))
            assert limit == pytest.approx(moment_general(hi, y0, y, x, p), rel=1e-8, abs=1e-8)


def test_rescaled_moment_has_minus_one_on_its_normalizing_branch(q3_params):
    x = np.array([[0.2, 0.1], [-0.5, 0.3], [0.7, -0.2]])
    idx = MomentIndex(2, 1, 2, 1)
    # y1 <= q1 and y2 > q2
    v = moment_general(idx, 2, [1, 3, 2], x, q3_params)
    assert rescale_tilde(v, idx, 2, x, q3_params) == pytest.approx(-1.0, abs=1e-14)
    # and the unrescaled function carries -1 on y1 > q1, y2 < q2
    assert moment_general(idx, 2, [2, 1, 3], x, q3_params) == -1.0


def test_reversal_maps_moment_functions(rng):
    Q = 4
    worst = 0.0
    for _ in range(5):
        p = random_params(rng, Q, 2)
        r = p.reversed()
        x = rng.normal(size=(3, 2))
        for idx in enumerate_indices(Q, 3)[::7]:
            ri = idx.reversed(Q)
            for y in all_paths(Q, 3)[::5]:
                a = moment_t3(idx, idx.y0, y, x, p)
                b = moment_t3(ri, ri.y0, Q + 1 - y, x, r)
                if idx.kind(Q) == "interior":
                    b = rescale_tilde(b, ri, ri.y0, x, r)
                worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    assert worst < 1e-12


def test_coinciding_thresholds_are_singular():
    from dopl.moments import _interior_values

    lam_ext = np.array([-np.inf, 0.0, 0.0, np.inf])
    with pytest.raises(SingularParameterError):
        _interior_values(1, 2, 1, np.array([1]), np.array([2]), np.array([1]),
                         np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([0.0]), lam_ext)


def test_index_validation():
    with pytest.raises(ValueError):
        MomentIndex(1, 1, 2, 1, t=2, s=2, r=3, history=(1,))
    with pytest.raises(ValueError):
        MomentIndex(1, 1, 2, 1, t=2, s=3, r=4)
    with pytest.raises(ValueError):
        MomentIndex(0, 1, 1, 1)
    with pytest.raises(ValueError):
        MomentIndex(1, 1, 2, 1, r=4).validate(3, 4)
    with pytest.raises(ValueError):
        enumerate_indices(1, 3)
    with pytest.raises(ValueError):
        enumerate_indices(3, 2)


def test_family_evaluator_matches_single_evaluation(q3_params, rng):
    n, T = 30, 4
    y0 = rng.integers(1, 4, n)
    y = rng.integers(1, 4, (n, T))
    x = rng.normal(size=(n, T, 2))
    fam = enumerate_indices(3, T, boundary_gaps=True)
    ev = FamilyEvaluator(fam, y0, y, x, 3)
    vals = ev.values(q3_params)
    for i in range(0, n, 7):
        for j in range(0, len(fam), 11):
            f = fam[j]
            ref = moment_general(f, f.y0, y[i], x[i], q3_params) if y0[i] == f.y0 else 0.0
            assert vals[i, j] == pytest.approx(ref, rel=1e-13, abs=1e-13)


def test_exponentials_stay_finite_for_moderate_inputs(q3_params):
    x = np.full((3, 2), 5.0)
    v = moment_general(MomentIndex(1, 1, 3, 2), 1, [1, 3, 1], x, q3_params)
    assert math.isfinite(v)
