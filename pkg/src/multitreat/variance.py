"""Conditional outcome variances and the covariance of the pairwise effect estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, all_pairs
from .estimators import GroupRegression, ImputedOutcomes
from .matching import MatchResult


class VarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConditionalVariances:
    sigma2: np.ndarray
    method: str
    J: int


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    var_ybar: np.ndarray
    cov_tau: np.ndarray
    pairs: tuple


def _within(matches: MatchResult) -> np.ndarray:
    if matches.within_matches is None:
        raise VarianceError("within-group matches are required (run within_group_match)")
    return matches.within_matches


def _local_variance(values: np.ndarray, within: np.ndarray) -> np.ndarray:
    J = within.shape[1]
    return J / (J + 1) * (values - values[within].mean(axis=1)) ** 2


def sigma2_raw(ds: Dataset, matches: MatchResult) -> ConditionalVariances:
    """J/(J+1) * (Y_i - mean of the J same-group neighbours' outcomes)^2."""
    within = _within(matches)
    return ConditionalVariances(_local_variance(ds.outcomes, within), "raw_match", within.shape[1])


def sigma2_residual(ds: Dataset, matches: MatchResult, regs: GroupRegression) -> ConditionalVariances:
    """Same local form applied to residuals from the per-group regressions."""
    within = _within(matches)
    return ConditionalVariances(
        _local_variance(regs.residuals(ds), within), "residual_corrected", within.shape[1]
    )


def var_ybar(
    ds: Dataset, imputed: ImputedOutcomes, matches: MatchResult, sig: ConditionalVariances, t: int
) -> np.ndarray:
    """Estimated variance of each group-t mean of imputed outcomes.

    (1/n_t^2) sum_{W_i=t} (Yhat_i(j) - Ybar(j))^2
      + (1/n_t^2) sum_i T_ij psi_it (psi_it - 1) / m^2 * sigma2_i
    """
    rows = ds.group(t)
    nt = len(rows)
    if len(sig.sigma2) != ds.n or matches.n != ds.n or imputed.yhat.shape != (ds.n, ds.Z):
        raise VarianceError("inputs do not describe the same units")
    block = imputed.yhat[rows]
    if np.isnan(block).any():
        raise VarianceError(f"imputations missing for group-{t} units")
    centered = np.sum((block - block.mean(axis=0)) ** 2, axis=0)
    psi = matches.psi[:, t - 1].astype(float)
    reuse = psi * (psi - 1.0) / matches.m ** 2 * sig.sigma2
    second = np.bincount(ds.treatments - 1, weights=reuse, minlength=ds.Z)
    return (centered + second) / nt ** 2


def pair_variance(
    ds: Dataset, imputed: ImputedOutcomes, matches: MatchResult, sig: ConditionalVariances, t: int, j: int, k: int
) -> float:
    """Variance of a single pairwise estimate, evaluated directly from its own display."""
    rows = ds.group(t)
    nt = len(rows)
    d = imputed.yhat[rows, j - 1] - imputed.yhat[rows, k - 1]
    psi = matches.psi[:, t - 1].astype(float)
    T = ds.indicator(j) + ds.indicator(k)
    return float(
        np.sum((d - d.mean()) ** 2) / nt ** 2
        + np.sum(T * psi * (psi - 1.0) / matches.m ** 2 * sig.sigma2) / nt ** 2
    )


def contrast_matrix(Z: int, pairs=None) -> np.ndarray:
    pairs = all_pairs(Z) if pairs is None else pairs
    A = np.zeros((len(pairs), Z))
    for q, (j, k) in enumerate(pairs):
        A[q, j - 1] = 1.0
        A[q, k - 1] = -1.0
    return A


def assemble_covariance(var_ybar, Z: int | None = None, pairs=None) -> CovarianceMatrix:
    """A diag(var_ybar) A^T for the contrast matrix A of the pair order."""
    v = np.asarray(var_ybar, dtype=float)
    Z = len(v) if Z is None else Z
    if len(v) != Z:
        raise VarianceError(f"expected {Z} variances, got {len(v)}")
    if np.any(v < 0):
        raise VarianceError("variances must be non-negative")
    pairs = all_pairs(Z) if pairs is None else tuple(pairs)
    A = contrast_matrix(Z, pairs)
    cov = (A * v) @ A.T
    return CovarianceMatrix(v, 0.5 * (cov + cov.T), pairs)


def randomization_covariance(ds: Dataset, imputed: ImputedOutcomes, t: int, pairs=None) -> np.ndarray:
    """Sample covariance of the unit-level differences Yhat_i(j) - Yhat_i(k), divided by n_t.

    This comparator treats the imputed differences as independent draws and
    so ignores match reuse.
    """
    rows = ds.group(t)
    nt = len(rows)
    if nt < 2:
        raise VarianceError("randomization-based variance needs at least 2 reference units")
    pairs = all_pairs(ds.Z) if pairs is None else pairs
    D = np.column_stack([imputed.yhat[rows, j - 1] - imputed.yhat[rows, k - 1] for j, k in pairs])
    if np.isnan(D).any():
        raise VarianceError(f"imputations missing for group-{t} units")
    return np.atleast_2d(np.cov(D, rowvar=False, ddof=1)) / nt


randomization_se = randomization_covariance
