"""End-to-end matching estimates for one reference group."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .estimators import (
    EffectEstimate,
    EstimationError,
    GroupRegression,
    bias_hat,
    estimate_att,
    fit_group_regressions,
    impute_basic,
    impute_bias_corrected,
)
from .gps import GpsModel
from .matching import KINDS, MatchResult, distance_matrix, knn_match, vector_match, within_group_match
from .variance import (
    assemble_covariance,
    randomization_covariance,
    sigma2_raw,
    sigma2_residual,
    var_ybar,
)

VARIANTS = ("B-N", "BC-N", "B-R", "BC-R")


@dataclass
class MatchingSettings:
    matching: str = "vector"
    m: int = 1
    J: int = 1
    K: int = 5
    n_init: int = 10
    sigma: str = "auto"
    interactions: bool = False
    seed: int = 0


def match_reference(ds: Dataset, gps: GpsModel, t: int, settings: MatchingSettings) -> MatchResult:
    """Cross-group matches for group t plus within-group matches for variance estimation."""
    if settings.matching == "vector":
        cross = vector_match(ds, gps, t, settings.m, settings.K, n_init=settings.n_init, seed=settings.seed)
    elif settings.matching in KINDS:
        cross = knn_match(ds, distance_matrix(ds, gps, settings.matching), settings.m, t)
    else:
        raise ValueError(f"unknown matching method {settings.matching!r}")
    return cross.with_within(within_group_match(ds, gps, settings.J))


def try_regressions(ds: Dataset, interactions: bool) -> GroupRegression | None:
    try:
        return fit_group_regressions(ds, interactions)
    except EstimationError:
        return None


def all_variants(
    ds: Dataset,
    gps: GpsModel,
    t: int,
    settings: MatchingSettings,
    *,
    matches: MatchResult | None = None,
    regs: GroupRegression | None = None,
) -> dict[str, EffectEstimate]:
    """Basic and bias-corrected estimates with matching-based (N) and randomization (R) covariances.

    Bias-corrected variants need per-group regressions and are omitted when
    they cannot be fitted.
    """
    if matches is None:
        matches = match_reference(ds, gps, t, settings)
    if regs is None:
        regs = try_regressions(ds, settings.interactions)
    sigma = settings.sigma
    if sigma == "auto":
        sigma = "raw_match" if regs is None else "residual_corrected"
    if sigma == "residual_corrected":
        if regs is None:
            raise EstimationError("residual-corrected variances need per-group regressions")
        sig = sigma2_residual(ds, matches, regs)
    else:
        sig = sigma2_raw(ds, matches)

    imputations = {"B": impute_basic(ds, matches)}
    bhat = None
    if regs is not None:
        imputations["BC"] = impute_bias_corrected(ds, matches, regs)
        bhat = bias_hat(ds, matches, regs, t)
    out = {}
    for name, imp in imputations.items():
        base = estimate_att(ds, imp, matches, t)
        cov_n = assemble_covariance(var_ybar(ds, imp, matches, sig, t), ds.Z, base.pairs).cov_tau
        cov_r = randomization_covariance(ds, imp, t, base.pairs)
        for se_name, cov in (("N", cov_n), ("R", cov_r)):
            flags = dict(base.variant)
            flags.update({"se": "new" if se_name == "N" else "randomization", "J": matches.J,
                          "sigma2": sig.method})
            if se_name == "R":
                flags["se_note"] = "sample covariance of imputed differences / n_t"
            out[f"{name}-{se_name}"] = EffectEstimate(
                t, base.pairs, base.tau_hat, cov, base.ybar, flags, ds.labels,
                bias_hat=bhat if name == "BC" else None,
            )
    return out


def estimate_reference(
    ds: Dataset, gps: GpsModel, t: int, settings: MatchingSettings, *, estimator="bc", se="new"
) -> EffectEstimate:
    key = {"basic": "B", "bc": "BC"}[estimator] + "-" + {"new": "N", "randomization": "R"}[se]
    variants = all_variants(ds, gps, t, settings)
    if key not in variants:
        raise EstimationError(f"{key} unavailable: per-group regressions could not be fitted")
    return variants[key]


def seeds_for(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]
