import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multitreat.data import Dataset, all_pairs
from multitreat.estimators import (
    EffectEstimate,
    EstimationError,
    att_closed_form,
    bias_corrected_by_subtraction,
    bias_hat,
    estimate_ate,
    estimate_att,
    fit_group_regressions,
    impute_basic,
    impute_bias_corrected,
    ybar_closed_form,
)
from multitreat.matching import Metric, knn_match

import oracles
from conftest import random_dataset


def matched(ds, t, m=1, scope=None):
    return knn_match(ds, Metric.from_points(ds.covariates), m=m, scope=t if scope is None else scope)


def test_single_match_and_two_match_means():
    X = np.array([[0.0], [0.1], [5.0], [0.2], [0.3], [9.0]])
    ds = Dataset(X, [1, 2, 1, 2, 3, 3], np.array([10.0, 2.0, 11.0, 4.0, 7.0, 8.0]))
    yhat = impute_basic(ds, matched(ds, 1, m=1)).yhat
    assert yhat[0, 1] == 2.0 and yhat[0, 2] == 7.0
    yhat = impute_basic(ds, matched(ds, 1, m=2)).yhat
    assert yhat[0, 1] == 3.0
    np.testing.assert_array_equal(yhat[np.arange(6), ds.treatments - 1], ds.outcomes)


def test_one_unit_per_group_forced_estimates():
    ds = Dataset(np.array([[0.0], [1.0], [2.0]]), [1, 2, 3], np.array([5.0, 2.0, -1.0]))
    est = estimate_att(ds, impute_basic(ds, matched(ds, 1)), matched(ds, 1), 1)
    np.testing.assert_array_equal(est.tau_hat, [3.0, 6.0, 3.0])
    assert est.variant["covariance_unreliable"]


def test_identical_covariates_use_lowest_index_and_group_mean():
    W = np.array([2, 1, 3, 1, 2, 3, 1])
    Y = np.array([4.0, 1.0, 9.0, 3.0, 6.0, 7.0, 5.0])
    ds = Dataset(np.zeros((7, 1)), W, Y, n_treatments=3)
    est = estimate_att(ds, impute_basic(ds, matched(ds, 1)), None, 1)
    np.testing.assert_array_equal(est.ybar, [3.0, 4.0, 9.0])


def test_full_group_matching_gives_difference_of_means():
    W = np.repeat([1, 2, 3], [4, 5, 6])
    Y = np.random.default_rng(0).standard_normal(15)
    ds = Dataset(np.zeros((15, 1)), W, Y, n_treatments=3)
    res = knn_match(ds, Metric.from_points(ds.covariates), m=4, scope=2)
    est = estimate_att(ds, impute_basic(ds, res), res, 2)
    means = [Y[W == w].mean() for w in (1, 2, 3)]
    np.testing.assert_allclose(est.ybar[[0, 1]], means[:2], rtol=1e-14)
    # m = 4 < n_3: only the lowest four group-3 units are used, by tie-break
    assert est.ybar[2] == pytest.approx(Y[W == 3][:4].mean(), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_att_equals_oracle_and_closed_form(seed):
    Z = 3 + seed % 2
    ds = random_dataset(seed, n=30, Z=Z, P=3)
    t = seed % Z + 1
    m = 1 + seed % 3
    res = matched(ds, t, m)
    est = estimate_att(ds, impute_basic(ds, res), res, t)
    sets = oracles.match_sets(ds.covariates.tolist(), ds.treatments.tolist(), t, m)
    taus, ybar, _ = oracles.att(ds.outcomes.tolist(), ds.treatments.tolist(), sets, Z, t)
    np.testing.assert_allclose(est.tau_hat, taus, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(est.ybar, ybar, rtol=1e-12)
    np.testing.assert_allclose(att_closed_form(ds, res, t), est.tau_hat, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ybar_closed_form(ds, res, t), est.ybar, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 4), st.integers(1, 2),
       st.floats(-50, 50), st.floats(0.1, 20))
def test_transitivity_skew_symmetry_and_equivariance(seed, Z, m, shift, scale):
    ds = random_dataset(seed, n=32, Z=Z, P=2)
    t = seed % Z + 1
    res = matched(ds, t, m)
    est = estimate_att(ds, impute_basic(ds, res), res, t)
    for j in range(1, Z + 1):
        for k in range(j + 1, Z + 1):
            assert est.effect(k, j) == -est.effect(j, k)
            for l in range(k + 1, Z + 1):
                assert est.effect(j, k) + est.effect(k, l) == pytest.approx(est.effect(j, l), abs=1e-12)
    moved = Dataset(ds.covariates, ds.treatments, scale * ds.outcomes + shift, n_treatments=Z)
    est2 = estimate_att(moved, impute_basic(moved, res), res, t)
    np.testing.assert_allclose(est2.tau_hat, scale * est.tau_hat, atol=1e-9 * (1 + abs(shift)))


def test_invalid_reference():
    ds = random_dataset(0)
    res = matched(ds, 1)
    with pytest.raises(EstimationError):
        estimate_att(ds, impute_basic(ds, res), res, 4)
    with pytest.raises(EstimationError, match="lack imputations"):
        estimate_att(ds, impute_basic(ds, res), res, 2)


def test_effect_lookup_and_json():
    est = EffectEstimate(1, all_pairs(3), np.array([1.0, 2.0, 1.0]), np.eye(3), np.zeros(3), {"estimator": "basic"})
    assert est.effect(3, 1) == -2.0
    with pytest.raises(KeyError):
        est.effect(1, 1)
    d = est.to_dict()
    assert d["pairs"] == [[1, 2], [1, 3], [2, 3]] and len(d["covariance"]) == 9


def test_noiseless_regression_recovers_line():
    x = np.linspace(0, 3, 8)
    ds = Dataset(np.tile(x, 2).reshape(-1, 1), np.repeat([1, 2], 8), np.concatenate([1 + 2 * x, -1 + 0.5 * x]))
    regs = fit_group_regressions(ds)
    np.testing.assert_allclose(regs.coefficients[1], [1, 2], atol=1e-10)
    np.testing.assert_allclose(regs.coefficients[2], [-1, 0.5], atol=1e-10)


def test_constant_outcome_gives_zero_slopes(small_ds):
    ds = Dataset(small_ds.covariates, small_ds.treatments, np.full(small_ds.n, 2.5), n_treatments=3)
    regs = fit_group_regressions(ds)
    for w in (1, 2, 3):
        np.testing.assert_allclose(regs.coefficients[w], [2.5, 0, 0, 0], atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_regression_matches_inverse_oracle_and_normal_equations(seed):
    ds = random_dataset(seed, n=40, P=3)
    regs = fit_group_regressions(ds)
    fits = oracles.group_fits(ds.covariates, ds.outcomes, ds.treatments, 3)
    for w in (1, 2, 3):
        np.testing.assert_allclose(regs.coefficients[w], fits[w], rtol=1e-9, atol=1e-10)
        G = ds.group(w)
        D = regs.design(ds.covariates[G])
        assert np.max(np.abs(D.T @ regs.residuals(ds)[G])) < 1e-8


def test_interactions_add_pairwise_products(small_ds):
    ds = random_dataset(3, n=60, P=3)
    regs = fit_group_regressions(ds, interactions=True)
    assert regs.column_names == ("intercept", "x1", "x2", "x3", "x1*x2", "x1*x3", "x2*x3")
    assert len(regs.coefficients[1]) == 7


def test_collinear_design_reports_columns():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    ds = Dataset(np.column_stack([x, 2 * x]), np.repeat([1, 2], 10), rng.standard_normal(20))
    with pytest.raises(EstimationError, match=r"dependent column\(s\) \['x[12]'\]"):
        fit_group_regressions(ds)
    regs = fit_group_regressions(ds, collinear="drop")
    assert len(regs.dropped[1]) == 1
    single = Dataset(x.reshape(-1, 1), ds.treatments, ds.outcomes)
    np.testing.assert_allclose(regs.residuals(ds), fit_group_regressions(single).residuals(single), atol=1e-10)


def test_regression_needs_enough_units():
    ds = random_dataset(0, n=12, P=4, min_group=4)
    with pytest.raises(EstimationError, match="need more than"):
        fit_group_regressions(ds)


def test_bias_correction_vanishes_for_exact_covariate_matches():
    X = np.repeat(np.arange(5.0), 3).reshape(-1, 1)
    W = np.tile([1, 2, 3], 5)
    Y = np.random.default_rng(1).standard_normal(15)
    ds = Dataset(X, W, Y, n_treatments=3)
    res = matched(ds, 1)
    regs = fit_group_regressions(ds)
    np.testing.assert_allclose(impute_bias_corrected(ds, res, regs).yhat, impute_basic(ds, res).yhat, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_bias_corrected_two_routes_and_oracle(seed):
    Z = 3 + seed % 2
    ds = random_dataset(seed, n=40, Z=Z, P=2, min_group=6)
    t = seed % Z + 1
    res = matched(ds, t, m=1 + seed % 2)
    regs = fit_group_regressions(ds)
    basic = estimate_att(ds, impute_basic(ds, res), res, t)
    bc = estimate_att(ds, impute_bias_corrected(ds, res, regs), res, t)
    bh = bias_hat(ds, res, regs, t)
    np.testing.assert_allclose(bias_corrected_by_subtraction(basic, bh), bc.tau_hat, rtol=0, atol=1e-10)
    sets = oracles.match_sets(ds.covariates.tolist(), ds.treatments.tolist(), t, res.m)
    fits = oracles.group_fits(ds.covariates, ds.outcomes, ds.treatments, Z)
    np.testing.assert_allclose(bh, oracles.bias_hat(ds.covariates, ds.treatments, sets, fits, Z, t),
                               rtol=1e-9, atol=1e-10)


def test_noiseless_linear_truth_recovered_by_bias_correction():
    rng = np.random.default_rng(5)
    n, Z = 60, 3
    W = np.repeat([1, 2, 3], 20)
    X = rng.standard_normal((n, 2)) + W[:, None] * 0.7
    beta = rng.uniform(-2, 2, size=(Z, 3))
    potential = np.column_stack([beta[w, 0] + X @ beta[w, 1:] for w in range(Z)])
    ds = Dataset(X, W, potential[np.arange(n), W - 1], n_treatments=Z)
    for t in (1, 2, 3):
        res = matched(ds, t, m=2)
        bc = estimate_att(ds, impute_bias_corrected(ds, res, fit_group_regressions(ds)), res, t)
        rows = ds.group(t)
        truth = [potential[rows, j - 1].mean() - potential[rows, k - 1].mean() for j, k in all_pairs(Z)]
        np.testing.assert_allclose(bc.tau_hat, truth, atol=1e-8)


def test_ate_weights_follow_group_shares():
    ds = random_dataset(2, n=60, Z=3, min_group=10)
    W = np.repeat([1, 2, 3], [10, 20, 30])
    ds = Dataset(ds.covariates, W, ds.outcomes, n_treatments=3)
    per = []
    for t in (1, 2, 3):
        res = matched(ds, t)
        per.append(estimate_att(ds, impute_basic(ds, res), res, t))
    ate = estimate_ate(ds, per)
    want = per[0].tau_hat / 6 + per[1].tau_hat / 3 + per[2].tau_hat / 2
    np.testing.assert_allclose(ate.tau_hat, want, rtol=1e-14)
    assert ate.reference == "all" and ate.covariance is None


def test_ate_of_equal_estimates_is_common_value():
    ds = random_dataset(0)
    tau = np.array([1.0, -2.0, -3.0])
    per = [EffectEstimate(t, all_pairs(3), tau, variant={}) for t in (1, 2, 3)]
    np.testing.assert_allclose(estimate_ate(ds, per).tau_hat, tau, rtol=1e-14)
    with pytest.raises(EstimationError, match="missing"):
        estimate_ate(ds, per[:2])
