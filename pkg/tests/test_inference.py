import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multitreat.data import all_pairs
from multitreat.estimators import EffectEstimate
from multitreat.inference import (
    SingularCovarianceError,
    bonferroni_intervals,
    chi2_quantile,
    global_test,
    normal_quantile,
    quadratic_form,
    region_covers,
)
from multitreat.variance import assemble_covariance


def estimate(tau, cov, estimator="bias_corrected"):
    tau = np.asarray(tau, dtype=float)
    return EffectEstimate(1, all_pairs(3), tau, np.asarray(cov, dtype=float), variant={"estimator": estimator})


def test_quantiles():
    assert chi2_quantile(0.95, 3) == pytest.approx(7.8147, abs=1e-3)
    assert normal_quantile(1 - 0.05 / 6) == pytest.approx(2.3940, abs=1e-4)


def test_statistic_zero_at_estimate():
    rep = global_test(estimate([1.0, 2.0, 3.0], np.eye(3)), [1.0, 2.0, 3.0])
    assert rep.z2 == 0.0 and rep.p_value == 1.0 and rep.df == 3


def test_identity_covariance_statistic_and_radius():
    rep = global_test(estimate([1.0, 1.0, 1.0], np.eye(3)))
    assert rep.z2 == pytest.approx(3.0)
    assert rep.region_radius2 == pytest.approx(7.8147, abs=1e-3)
    assert 0 <= rep.p_value <= 1


def test_intervals_direct_values():
    ivs = bonferroni_intervals(estimate([1.0, 2.0, 3.0], np.eye(3)))
    for iv, c in zip(ivs, (1.0, 2.0, 3.0)):
        assert iv.lower == pytest.approx(c - 2.394, abs=1e-3)
        assert iv.upper == pytest.approx(c + 2.394, abs=1e-3)
        assert iv.upper - iv.estimate == pytest.approx(iv.estimate - iv.lower)
        assert iv.level == pytest.approx(0.05 / 3)
    flat = bonferroni_intervals(estimate([1.0, 2.0, 3.0], np.zeros((3, 3))))
    assert all(iv.lower == iv.upper == iv.estimate for iv in flat)


def test_region_membership_examples():
    est = estimate([0.5, -0.2, 1.0], np.eye(3))
    assert region_covers(est, est.tau_hat)
    assert not region_covers(est, est.tau_hat + np.array([10.0, 0.0, 0.0]))


def test_singular_covariance_raises_or_uses_pseudo_inverse():
    cov = assemble_covariance([1.0, 2.0, 3.0]).cov_tau
    est = estimate([1.0, 2.0, 1.0], cov)
    with pytest.raises(SingularCovarianceError, match="smallest eigenvalue"):
        global_test(est)
    rep = global_test(est, singular="pinv")
    assert rep.df == 2
    # tau lies in the range of A, so the pseudo-inverse form equals the contrast-space form
    A = np.array([[1, -1, 0], [1, 0, -1]], dtype=float)
    sub = A @ np.diag([1.0, 2.0, 3.0]) @ A.T
    assert rep.z2 == pytest.approx(est.tau_hat[:2] @ np.linalg.solve(sub, est.tau_hat[:2]), rel=1e-10)


def test_dimension_and_alpha_checks():
    est = estimate([1.0, 2.0, 3.0], np.eye(3))
    with pytest.raises(ValueError, match="dimension"):
        global_test(est, [0.0, 0.0])
    with pytest.raises(ValueError):
        global_test(est, alpha=1.5)
    with pytest.raises(ValueError, match="dimension"):
        quadratic_form([1.0, 2.0], np.eye(3))


def test_basic_estimator_carries_caveat():
    assert "caveat" in global_test(estimate([1.0, 2.0, 3.0], np.eye(3), "basic")).method_flags
    assert "caveat" not in global_test(estimate([1.0, 2.0, 3.0], np.eye(3))).method_flags


def test_pivot_coverage_with_known_covariance():
    rng = np.random.default_rng(20240607)
    B = rng.standard_normal((3, 3))
    cov = B @ B.T + 0.5 * np.eye(3)
    tau = np.array([0.3, -1.0, 2.0])
    draws = rng.multivariate_normal(tau, cov, size=10_000)
    hits = np.mean([region_covers(estimate(d, cov), tau) for d in draws])
    assert abs(hits - 0.95) <= 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_statistic_invariant_to_outcome_scale(seed, c):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((3, 3))
    cov = B @ B.T + 0.1 * np.eye(3)
    tau = rng.standard_normal(3)
    a = global_test(estimate(tau, cov)).z2
    b = global_test(estimate(c * tau, c * c * cov)).z2
    assert b == pytest.approx(a, rel=1e-8, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(3)))
def test_region_membership_invariant_to_pair_order(seed, perm):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((3, 3))
    cov = B @ B.T + 0.1 * np.eye(3)
    tau, truth = rng.standard_normal(3), rng.standard_normal(3)
    perm = list(perm)
    a, _ = quadratic_form(tau - truth, cov)
    b, _ = quadratic_form((tau - truth)[perm], cov[np.ix_(perm, perm)])
    assert a == pytest.approx(b, rel=1e-10)


def test_p_value_decreases_along_a_direction():
    direction = np.array([1.0, -0.5, 2.0])
    cov = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.5]])
    p = [global_test(estimate(s * direction, cov)).p_value for s in np.linspace(0, 3, 16)]
    assert all(x > y for x, y in zip(p, p[1:]))


def test_report_json_shape():
    d = global_test(estimate([1.0, 2.0, 3.0], np.eye(3))).to_dict()
    assert set(d) == {"z2", "df", "p_value", "alpha", "region_radius2", "intervals", "method_flags"}
    assert d["intervals"][0]["pair"] == [1, 2]
