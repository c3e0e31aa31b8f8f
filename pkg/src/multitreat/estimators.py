"""Matching imputation, basic and bias-corrected effect estimates, ATE aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import qr, solve_triangular

from .data import Dataset, all_pairs
from .matching import MatchResult

RANK_TOL = 1e-10


class EstimationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImputedOutcomes:
    """``yhat[i, w-1]`` is the imputed Y_i(w); NaN where unit i imputes nothing for w."""

    yhat: np.ndarray
    variant: str = "basic"


@dataclass(eq=False)
class EffectEstimate:
    reference: int | str
    pairs: tuple
    tau_hat: np.ndarray
    covariance: np.ndarray | None = None
    ybar: np.ndarray | None = None
    variant: dict = field(default_factory=dict)
    labels: tuple = ()
    bias_hat: np.ndarray | None = None

    def effect(self, j: int, k: int) -> float:
        """Estimate for the ordered pair (j, k); reversed pairs flip sign."""
        if (j, k) in self.pairs:
            return float(self.tau_hat[self.pairs.index((j, k))])
        if (k, j) in self.pairs:
            return -float(self.tau_hat[self.pairs.index((k, j))])
        raise KeyError((j, k))

    @property
    def standard_errors(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def to_dict(self) -> dict:
        cov = None if self.covariance is None else [float(v) for v in np.ravel(self.covariance)]
        return {
            "reference": self.reference,
            "pairs": [list(p) for p in self.pairs],
            "labels": list(self.labels),
            "tau_hat": [float(v) for v in self.tau_hat],
            "covariance": cov,
            "ybar": None if self.ybar is None else [float(v) for v in self.ybar],
            "variant": self.variant.get("estimator"),
            "m": self.variant.get("m"),
            "J": self.variant.get("J"),
            "flags": {k: v for k, v in self.variant.items() if k not in ("estimator", "m", "J")},
        }


def impute_basic(ds: Dataset, matches: MatchResult) -> ImputedOutcomes:
    yhat = np.full((ds.n, ds.Z), np.nan)
    yhat[np.arange(ds.n), ds.treatments - 1] = ds.outcomes
    for w, arr in matches.cross_matches.items():
        rows = np.flatnonzero(arr[:, 0] >= 0)
        yhat[rows, w - 1] = ds.outcomes[arr[rows]].mean(axis=1)
    return ImputedOutcomes(yhat, "basic")


def _check_reference(ds: Dataset, t) -> int:
    if isinstance(t, str) or not 1 <= int(t) <= ds.Z:
        raise EstimationError(f"invalid reference group {t!r}")
    return int(t)


def estimate_att(
    ds: Dataset, imputed: ImputedOutcomes, matches: MatchResult | None, t: int, pairs=None
) -> EffectEstimate:
    """Point estimates of the pairwise effects on group t, from the imputation table."""
    t = _check_reference(ds, t)
    pairs = all_pairs(ds.Z) if pairs is None else tuple(pairs)
    rows = ds.group(t)
    block = imputed.yhat[rows]
    if np.isnan(block).any():
        w = int(np.argwhere(np.isnan(block))[0, 1]) + 1
        raise EstimationError(f"group-{t} units lack imputations for treatment {w}")
    ybar = block.mean(axis=0)
    tau = np.array([ybar[j - 1] - ybar[k - 1] for j, k in pairs])
    variant = {"estimator": imputed.variant}
    if matches is not None:
        variant["m"] = matches.m
        variant["matching"] = matches.distance_spec.get("kind")
    if len(rows) == 1:
        variant["covariance_unreliable"] = True
    return EffectEstimate(t, pairs, tau, ybar=ybar, variant=variant, labels=ds.labels)


def ybar_closed_form(ds: Dataset, matches: MatchResult, t: int) -> np.ndarray:
    """Group means of imputed outcomes from reuse counts: (1/n_t) sum T_iw (T_it + psi_it/m) Y_i."""
    nt = np.sum(ds.treatments == t)
    weight = ds.indicator(t) + matches.psi[:, t - 1] / matches.m
    return np.array([np.sum(ds.indicator(w) * weight * ds.outcomes) for w in range(1, ds.Z + 1)]) / nt


def att_closed_form(ds: Dataset, matches: MatchResult, t: int, pairs=None) -> np.ndarray:
    pairs = all_pairs(ds.Z) if pairs is None else pairs
    yb = ybar_closed_form(ds, matches, t)
    return np.array([yb[j - 1] - yb[k - 1] for j, k in pairs])


@dataclass(frozen=True, eq=False)
class GroupRegression:
    """Per-group OLS fits of the outcome on intercept + covariates (+ pairwise products)."""

    coefficients: dict
    interactions: bool
    column_names: tuple
    dropped: dict = field(default_factory=dict)

    def design(self, X) -> np.ndarray:
        return regression_design(X, self.interactions)

    def predict(self, w: int, X) -> np.ndarray:
        return self.design(X) @ self.coefficients[w]

    def residuals(self, ds: Dataset) -> np.ndarray:
        fitted = np.empty(ds.n)
        for w in range(1, ds.Z + 1):
            G = ds.group(w)
            fitted[G] = self.predict(w, ds.covariates[G])
        return ds.outcomes - fitted


def regression_design(X, interactions: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    cols = [np.ones(len(X)), *X.T]
    if interactions:
        cols += [X[:, a] * X[:, b] for a, b in combinations(range(X.shape[1]), 2)]
    return np.column_stack(cols)


def _design_names(names, interactions):
    out = ["intercept", *names]
    if interactions:
        out += [f"{names[a]}*{names[b]}" for a, b in combinations(range(len(names)), 2)]
    return tuple(out)


def _ols(D, y, names, w, collinear):
    Q, R, piv = qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1.0))) if len(diag) else 0
    beta = np.zeros(D.shape[1])
    dropped = [names[c] for c in sorted(piv[rank:])]
    if dropped and collinear == "raise":
        raise EstimationError(f"rank-deficient design in group {w}: dependent column(s) {dropped}")
    beta[piv[:rank]] = solve_triangular(R[:rank, :rank], Q[:, :rank].T @ y)
    return beta, dropped


def fit_group_regressions(ds: Dataset, interactions: bool = False, *, collinear: str = "raise") -> GroupRegression:
    """OLS of Y on the design within each treatment group, solved by pivoted QR.

    ``collinear="drop"`` zeroes the coefficients of linearly dependent columns
    instead of raising.
    """
    names = _design_names(ds.covariate_names, interactions)
    coefs, dropped = {}, {}
    for w in range(1, ds.Z + 1):
        G = ds.group(w)
        D = regression_design(ds.covariates[G], interactions)
        if len(G) <= D.shape[1]:
            raise EstimationError(
                f"group {w} has {len(G)} units; need more than {D.shape[1]} for the regression"
            )
        coefs[w], dropped[w] = _ols(D, ds.outcomes[G], names, w, collinear)
    return GroupRegression(coefs, interactions, names, {w: d for w, d in dropped.items() if d})


def impute_bias_corrected(ds: Dataset, matches: MatchResult, regs: GroupRegression) -> ImputedOutcomes:
    yhat = np.full((ds.n, ds.Z), np.nan)
    yhat[np.arange(ds.n), ds.treatments - 1] = ds.outcomes
    for w, arr in matches.cross_matches.items():
        rows = np.flatnonzero(arr[:, 0] >= 0)
        if len(rows) == 0:
            continue
        idx = arr[rows]
        mu_self = regs.predict(w, ds.covariates[rows])
        mu_match = regs.predict(w, ds.covariates[idx.ravel()]).reshape(idx.shape)
        yhat[rows, w - 1] = np.mean(ds.outcomes[idx] + mu_self[:, None] - mu_match, axis=1)
    return ImputedOutcomes(yhat, "bias_corrected")


def bias_hat(ds: Dataset, matches: MatchResult, regs: GroupRegression, t: int) -> np.ndarray:
    """Estimated conditional matching bias per treatment (zero for w = t)."""
    t = _check_reference(ds, t)
    rows = ds.group(t)
    out = np.zeros(ds.Z)
    for w in range(1, ds.Z + 1):
        if w == t:
            continue
        idx = matches.cross_matches[w][rows]
        if np.any(idx < 0):
            raise EstimationError(f"missing match sets for treatment {w}")
        mu_self = regs.predict(w, ds.covariates[rows])
        mu_match = regs.predict(w, ds.covariates[idx.ravel()]).reshape(idx.shape)
        out[w - 1] = np.sum(mu_self[:, None] - mu_match) / (matches.m * len(rows))
    return out


def bias_corrected_by_subtraction(basic: EffectEstimate, bhat: np.ndarray) -> np.ndarray:
    """tau_bc(j,k) = tau(j,k) - (B_k - B_j)."""
    return np.array([
        tau - (bhat[k - 1] - bhat[j - 1]) for tau, (j, k) in zip(basic.tau_hat, basic.pairs)
    ])


def estimate_ate(ds: Dataset, per_reference) -> EffectEstimate:
    """Share-weighted combination of the per-reference estimates (point only)."""
    by_t = {e.reference: e for e in per_reference}
    missing = [t for t in range(1, ds.Z + 1) if t not in by_t]
    if missing:
        raise EstimationError(f"missing estimates for reference group(s) {missing}")
    pairs = by_t[1].pairs
    if any(by_t[t].pairs != pairs for t in by_t):
        raise EstimationError("per-reference estimates use different pair orders")
    sizes = ds.group_sizes
    tau = sum(sizes[t] / ds.n * by_t[t].tau_hat for t in range(1, ds.Z + 1))
    ybar = None
    if all(by_t[t].ybar is not None for t in by_t):
        ybar = sum(sizes[t] / ds.n * by_t[t].ybar for t in range(1, ds.Z + 1))
    variant = dict(by_t[1].variant)
    variant.pop("covariance_unreliable", None)
    variant["interval_estimation"] = "unavailable"
    return EffectEstimate("all", pairs, np.asarray(tau, dtype=float), None, ybar, variant, ds.labels)
