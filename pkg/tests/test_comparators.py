import numpy as np
import pytest

from multitreat.comparators import att_weights, dr_att, ipw_att
from multitreat.data import Dataset, all_pairs
from multitreat.estimators import GroupRegression, fit_group_regressions
from multitreat.gps import GpsModel, fit_gps

from conftest import random_dataset


def constant_gps(n, Z):
    return GpsModel(np.zeros((Z - 1, 1)), np.full((n, Z), 1.0 / Z), True, 0, 0.0, 0.0)


def zero_regressions(Z, P):
    return GroupRegression({w: np.zeros(P + 1) for w in range(1, Z + 1)}, False, ())


def test_constant_weights_give_difference_of_group_means(small_ds):
    est = ipw_att(small_ds, constant_gps(small_ds.n, 3), 1)
    means = [small_ds.outcomes[small_ds.treatments == w].mean() for w in (1, 2, 3)]
    np.testing.assert_allclose(est.tau_hat, [means[0] - means[1], means[0] - means[2], means[1] - means[2]])


def test_reference_group_uses_plain_mean(small_ds):
    gps = fit_gps(small_ds)
    for t in (1, 2, 3):
        est = ipw_att(small_ds, gps, t)
        assert est.group_means[t - 1] == pytest.approx(small_ds.outcomes[small_ds.treatments == t].mean())


@pytest.mark.parametrize("seed", range(5))
def test_ipw_equals_formula_oracle(seed):
    ds = random_dataset(seed, n=40)
    gps = fit_gps(ds)
    t = seed % 3 + 1
    est = ipw_att(ds, gps, t)
    S = gps.scores
    mu, V = [], []
    for w in range(1, 4):
        rows = [i for i in range(ds.n) if ds.treatments[i] == w]
        u = [1.0 if w == t else S[i, t - 1] / S[i, w - 1] for i in rows]
        m = sum(ui * ds.outcomes[i] for ui, i in zip(u, rows)) / sum(u)
        mu.append(m)
        V.append(sum(ui ** 2 * (ds.outcomes[i] - m) ** 2 for ui, i in zip(u, rows)) / sum(u) ** 2)
    pairs = all_pairs(3)
    np.testing.assert_allclose(est.tau_hat, [mu[j - 1] - mu[k - 1] for j, k in pairs], rtol=1e-12)
    np.testing.assert_allclose(est.standard_errors, [np.sqrt(V[j - 1] + V[k - 1]) for j, k in pairs], rtol=1e-10)


def test_dr_equals_ipw_with_zero_regressions(small_ds):
    gps = fit_gps(small_ds)
    a = ipw_att(small_ds, gps, 2)
    b = dr_att(small_ds, gps, zero_regressions(3, small_ds.P), 2)
    np.testing.assert_allclose(b.tau_hat, a.tau_hat, rtol=1e-12)


def test_dr_noiseless_linear_uses_predictions_exactly():
    ds0 = random_dataset(12, n=60)
    beta = np.array([[1.0, 2.0, -1.0, 0.5], [0.0, -1.0, 1.0, 1.0], [2.0, 0.5, 0.5, -0.5]])
    X, W = ds0.covariates, ds0.treatments
    potential = np.column_stack([beta[w, 0] + X @ beta[w, 1:] for w in range(3)])
    ds = Dataset(X, W, potential[np.arange(60), W - 1], n_treatments=3)
    est = dr_att(ds, fit_gps(ds), fit_group_regressions(ds), 1)
    rows = ds.group(1)
    truth = [potential[rows, j - 1].mean() - potential[rows, k - 1].mean() for j, k in all_pairs(3)]
    np.testing.assert_allclose(est.tau_hat, truth, atol=1e-10)


def test_dr_with_constant_gps_and_constant_regression_is_difference_of_means(small_ds):
    means = np.array([small_ds.outcomes[small_ds.treatments == w].mean() for w in (1, 2, 3)])
    regs = GroupRegression({w: np.array([means[w - 1], 0, 0, 0]) for w in (1, 2, 3)}, False, ())
    est = dr_att(small_ds, constant_gps(small_ds.n, 3), regs, 1)
    np.testing.assert_allclose(est.tau_hat, [means[j - 1] - means[k - 1] for j, k in all_pairs(3)], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_dr_equals_two_term_oracle(seed):
    ds = random_dataset(seed, n=45, min_group=6)
    gps = fit_gps(ds)
    regs = fit_group_regressions(ds)
    t = seed % 3 + 1
    est = dr_att(ds, gps, regs, t)
    S = gps.scores
    ref = [i for i in range(ds.n) if ds.treatments[i] == t]
    mu = []
    for w in range(1, 4):
        pred = sum(regs.predict(w, ds.covariates[i:i + 1])[0] for i in ref) / len(ref)
        rows = [i for i in range(ds.n) if ds.treatments[i] == w]
        u = [1.0 if w == t else S[i, t - 1] / S[i, w - 1] for i in rows]
        r = [ds.outcomes[i] - regs.predict(w, ds.covariates[i:i + 1])[0] for i in rows]
        mu.append(pred + sum(a * b for a, b in zip(u, r)) / sum(u))
    np.testing.assert_allclose(est.tau_hat, [mu[j - 1] - mu[k - 1] for j, k in all_pairs(3)], rtol=1e-10, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(est.covariance) >= -1e-12)


def test_shift_equivariance(small_ds):
    gps = fit_gps(small_ds)
    moved = Dataset(small_ds.covariates, small_ds.treatments, small_ds.outcomes + 40.0, n_treatments=3)
    pairs = [
        (ipw_att(small_ds, gps, 3), ipw_att(moved, gps, 3)),
        (dr_att(small_ds, gps, fit_group_regressions(small_ds), 3), dr_att(moved, gps, fit_group_regressions(moved), 3)),
    ]
    for a, b in pairs:
        np.testing.assert_allclose(b.tau_hat, a.tau_hat, atol=1e-10)
        np.testing.assert_allclose(b.covariance, a.covariance, atol=1e-10)


def test_weight_diagnostics_and_cap(small_ds):
    gps = fit_gps(small_ds)
    u = att_weights(small_ds, gps, 1)
    assert np.all(u > 0) and np.all(u[small_ds.treatments == 1] == 1.0)
    est = ipw_att(small_ds, gps, 1)
    assert est.max_weight == pytest.approx(u[small_ds.treatments != 1].max())
    for w, e in est.ess.items():
        assert e <= small_ds.group_sizes[w] + 1e-9
    capped = att_weights(small_ds, gps, 1, cap=0.5)
    assert capped[small_ds.treatments != 1].max() <= 0.5
    assert np.all(capped[small_ds.treatments == 1] == 1.0)
    assert ipw_att(small_ds, gps, 1, cap=0.5).flags["weight_cap"] == 0.5
    assert "plug-in" in est.to_dict()["flags"]["se_method"]
