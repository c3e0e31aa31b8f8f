"""Inverse probability weighting and doubly robust estimators of effects on group t.

Standard errors are plug-in linearizations that hold the weights and the
outcome regressions fixed; they ignore estimation of the GPS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, all_pairs
from .estimators import GroupRegression
from .gps import CLAMP, GpsModel

SE_METHOD = "plug-in linearization, weights fixed"


@dataclass(eq=False)
class ComparatorEstimate:
    method: str
    reference: int
    pairs: tuple
    tau_hat: np.ndarray
    covariance: np.ndarray
    group_means: np.ndarray
    max_weight: float
    ess: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "pairs": [list(p) for p in self.pairs],
            "tau_hat": [float(v) for v in self.tau_hat],
            "covariance": [float(v) for v in np.ravel(self.covariance)],
            "variant": self.method,
            "se": [float(v) for v in self.standard_errors],
            "max_weight": self.max_weight,
            "ess": {str(w): v for w, v in self.ess.items()},
            "flags": self.flags,
        }


def att_weights(ds: Dataset, gps: GpsModel, t: int, cap: float | None = None) -> np.ndarray:
    """u_i = r(t, X_i) / r(W_i, X_i), optionally capped; always 1 for the reference group."""
    S = np.clip(gps.scores, CLAMP, 1.0)
    u = S[:, t - 1] / S[np.arange(ds.n), ds.treatments - 1]
    if cap is not None:
        u = np.minimum(u, cap)
    u[ds.treatments == t] = 1.0
    return u


def _diagnostics(ds, u, t):
    ess = {}
    for w in range(1, ds.Z + 1):
        uw = u[ds.treatments == w]
        ess[w] = float(uw.sum() ** 2 / np.sum(uw ** 2))
    others = u[ds.treatments != t]
    return float(others.max() if len(others) else 1.0), ess


def _pairs_cov(contrib: dict, pairs):
    Phi = np.column_stack([contrib[p] for p in pairs])
    return Phi.T @ Phi


def _flags(cap):
    return {"se_method": SE_METHOD, "gps": "multinomial logit", "weight_cap": cap}


def ipw_att(ds: Dataset, gps: GpsModel, t: int, pairs=None, *, cap: float | None = None) -> ComparatorEstimate:
    """Weighted group means mu_w = sum u Y / sum u over group w; effects are differences."""
    pairs = all_pairs(ds.Z) if pairs is None else tuple(pairs)
    u = att_weights(ds, gps, t, cap)
    mu = np.empty(ds.Z)
    phi = {}
    for w in range(1, ds.Z + 1):
        mask = ds.treatments == w
        s = u[mask].sum()
        if not s > 0:
            raise ValueError(f"zero weight sum in group {w}")
        mu[w - 1] = np.sum(u[mask] * ds.outcomes[mask]) / s
        f = np.zeros(ds.n)
        f[mask] = u[mask] * (ds.outcomes[mask] - mu[w - 1]) / s
        phi[w] = f
    contrib = {(j, k): phi[j] - phi[k] for j, k in pairs}
    max_w, ess = _diagnostics(ds, u, t)
    return ComparatorEstimate(
        "IPW", t, pairs,
        np.array([mu[j - 1] - mu[k - 1] for j, k in pairs]),
        _pairs_cov(contrib, pairs), mu, max_w, ess, _flags(cap),
    )


def dr_att(
    ds: Dataset, gps: GpsModel, regs: GroupRegression, t: int, pairs=None, *, cap: float | None = None
) -> ComparatorEstimate:
    """Regression prediction averaged over group t plus a weighted residual correction.

    mu_w = mean_{W_i=t} muhat_w(X_i) + sum_{W_i=w} u_i (Y_i - muhat_w(X_i)) / sum_{W_i=w} u_i
    """
    pairs = all_pairs(ds.Z) if pairs is None else tuple(pairs)
    u = att_weights(ds, gps, t, cap)
    ref = ds.treatments == t
    nt = ref.sum()
    Xt = ds.covariates[ref]
    pred_t = {w: regs.predict(w, Xt) for w in range(1, ds.Z + 1)}
    resid = regs.residuals(ds)
    mu = np.empty(ds.Z)
    res_phi = {}
    for w in range(1, ds.Z + 1):
        mask = ds.treatments == w
        s = u[mask].sum()
        if not s > 0:
            raise ValueError(f"zero weight sum in group {w}")
        ebar = np.sum(u[mask] * resid[mask]) / s
        mu[w - 1] = pred_t[w].mean() + ebar
        f = np.zeros(ds.n)
        f[mask] = u[mask] * (resid[mask] - ebar) / s
        res_phi[w] = f
    contrib = {}
    for j, k in pairs:
        a = pred_t[j] - pred_t[k]
        f = np.zeros(ds.n)
        if j != t:
            f += res_phi[j]
        else:
            a = a + resid[ref]
        if k != t:
            f -= res_phi[k]
        else:
            a = a - resid[ref]
        f[ref] += (a - a.mean()) / nt
        contrib[(j, k)] = f
    max_w, ess = _diagnostics(ds, u, t)
    return ComparatorEstimate(
        "DR", t, pairs,
        np.array([mu[j - 1] - mu[k - 1] for j, k in pairs]),
        _pairs_cov(contrib, pairs), mu, max_w, ess, _flags(cap),
    )
