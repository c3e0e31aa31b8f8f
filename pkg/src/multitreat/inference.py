"""Global chi-square test, confidence-region membership and Bonferroni intervals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular

from .estimators import EffectEstimate

EIG_RTOL = 1e-10


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, smallest):
        super().__init__(
            f"covariance matrix is singular (smallest eigenvalue {smallest:.3g}); "
            "pass singular='pinv' to use the pseudo-inverse with reduced df"
        )
        self.smallest_eigenvalue = smallest


def chi2_quantile(level: float, df: int) -> float:
    return float(stats.chi2.ppf(level, df))


def normal_quantile(level: float) -> float:
    return float(stats.norm.ppf(level))


@dataclass
class Interval:
    pair: tuple
    estimate: float
    lower: float
    upper: float
    level: float


@dataclass
class InferenceReport:
    z2: float
    df: int
    p_value: float
    alpha: float
    region_radius2: float
    pair_intervals: list
    method_flags: dict = field(default_factory=dict)
    covered: bool | None = None

    def to_dict(self) -> dict:
        return {
            "z2": self.z2,
            "df": self.df,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "region_radius2": self.region_radius2,
            "intervals": [
                {"pair": list(iv.pair), "lo": iv.lower, "hi": iv.upper, "level": iv.level}
                for iv in self.pair_intervals
            ],
            "method_flags": self.method_flags,
        }


def quadratic_form(diff, cov, singular: str = "raise") -> tuple[float, int]:
    """diff^T cov^{-1} diff and its degrees of freedom.

    With ``singular="pinv"`` a rank-deficient covariance is inverted on its
    range and df is the numerical rank; otherwise singularity raises.
    """
    diff = np.asarray(diff, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (len(diff), len(diff)):
        raise ValueError(f"dimension mismatch: {len(diff)} effects, covariance {cov.shape}")
    cov = 0.5 * (cov + cov.T)
    lam, V = np.linalg.eigh(cov)
    tol = EIG_RTOL * max(lam[-1], 0.0)
    if singular == "pinv":
        keep = lam > tol
        if not keep.any():
            raise SingularCovarianceError(lam[0])
        proj = V[:, keep].T @ diff
        return float(np.sum(proj ** 2 / lam[keep])), int(keep.sum())
    if singular != "raise":
        raise ValueError(f"unknown singular policy {singular!r}")
    if lam[0] <= tol:
        raise SingularCovarianceError(lam[0])
    y = solve_triangular(np.linalg.cholesky(cov), diff, lower=True)
    return float(y @ y), len(diff)


def bonferroni_intervals(est: EffectEstimate, alpha: float = 0.05) -> list[Interval]:
    """tau_q +/- z_{1 - alpha/(2p)} * se_q for each of the p pairs."""
    _check_alpha(alpha)
    if est.covariance is None:
        raise ValueError("estimate has no covariance")
    p = len(est.tau_hat)
    var = np.diag(est.covariance)
    if np.any(var < 0):
        raise ValueError("negative variance on the covariance diagonal")
    z = normal_quantile(1.0 - alpha / (2 * p))
    se = np.sqrt(var)
    return [
        Interval(pair, float(tau), float(tau - z * s), float(tau + z * s), alpha / p)
        for pair, tau, s in zip(est.pairs, est.tau_hat, se)
    ]


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def global_test(
    est: EffectEstimate, null_tau=None, alpha: float = 0.05, *, singular: str = "raise"
) -> InferenceReport:
    """Chi-square test of tau = null_tau (default: no differences between treatments)."""
    _check_alpha(alpha)
    if est.covariance is None:
        raise ValueError("estimate has no covariance")
    null = np.zeros(len(est.tau_hat)) if null_tau is None else np.asarray(null_tau, dtype=float)
    if null.shape != est.tau_hat.shape:
        raise ValueError(f"dimension mismatch: null has {null.shape}, estimate {est.tau_hat.shape}")
    z2, df = quadratic_form(est.tau_hat - null, est.covariance, singular)
    flags = {"singular_policy": singular, "quantiles": "normal"}
    if est.variant.get("estimator") == "basic":
        flags["caveat"] = "basic estimator: statistic not centred for the conditional matching bias"
    return InferenceReport(
        z2=z2,
        df=df,
        p_value=float(stats.chi2.sf(z2, df)),
        alpha=alpha,
        region_radius2=chi2_quantile(1.0 - alpha, df),
        pair_intervals=bonferroni_intervals(est, alpha),
        method_flags=flags,
    )


def region_covers(est: EffectEstimate, true_tau, alpha: float = 0.05, *, singular: str = "raise") -> bool:
    """Whether ``true_tau`` lies in the 100(1-alpha)% confidence ellipsoid around ``est``."""
    _check_alpha(alpha)
    z2, df = quadratic_form(est.tau_hat - np.asarray(true_tau, dtype=float), est.covariance, singular)
    return bool(z2 <= chi2_quantile(1.0 - alpha, df))
