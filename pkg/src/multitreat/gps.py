"""Generalized propensity scores by multinomial logistic regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Dataset

logger = logging.getLogger(__name__)

CLAMP = 1e-12
GRAD_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 40
LL_ROUNDING = 64 * np.finfo(float).eps
DIVERGENCE_NORM = 1e4
SEPARATION_LOGLIK = 1e-6
SEPARATION_COND = 1e-14


class SeparationError(RuntimeError):
    """Coefficients diverge: the treatment groups are (quasi-)separable."""


@dataclass(frozen=True, eq=False)
class GpsModel:
    """Fitted multinomial-logit model.

    ``coefficients`` has one row per non-reference treatment (1..Z-1) and
    columns intercept + covariates; treatment Z is the reference with zero
    coefficients. ``scores[i, w-1]`` is r(w, X_i).
    """

    coefficients: np.ndarray
    scores: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    gradient_norm: float
    covariance: np.ndarray | None = None
    ridge: float = 0.0
    loglik_path: tuple = field(default=(), repr=False)

    @property
    def Z(self) -> int:
        return self.scores.shape[1]

    def standard_errors(self) -> np.ndarray:
        """Wald standard errors, shaped like ``coefficients``."""
        if self.covariance is None:
            raise ValueError("no coefficient covariance available")
        return np.sqrt(np.diag(self.covariance)).reshape(self.coefficients.shape)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _probabilities(_design(np.asarray(X, dtype=float)), self.coefficients)


def _design(X: np.ndarray) -> np.ndarray:
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return np.column_stack([np.ones(len(X)), X])


def _linear(D, beta):
    eta = D @ beta.T
    return np.column_stack([eta, np.zeros(len(D))])


def _probabilities(D, beta):
    eta = _linear(D, beta)
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def _loglik(D, Wi, beta, ridge):
    eta = _linear(D, beta)
    ll = eta[np.arange(len(D)), Wi].sum() - logsumexp(eta, axis=1).sum()
    return ll - 0.5 * ridge * np.sum(beta[:, 1:] ** 2)


def _grad_hess(D, Y, beta, ridge):
    """Gradient and Hessian of the log-likelihood, parameters flattened row-major."""
    Pr = _probabilities(D, beta)
    K, q = beta.shape
    resid = Y[:, :K] - Pr[:, :K]
    grad = (resid.T @ D)
    pen = np.zeros_like(beta)
    pen[:, 1:] = ridge * beta[:, 1:]
    grad = (grad - pen).ravel()
    H = np.empty((K * q, K * q))
    for a in range(K):
        for b in range(a, K):
            wts = Pr[:, a] * ((a == b) - Pr[:, b])
            block = -(D * wts[:, None]).T @ D
            H[a * q:(a + 1) * q, b * q:(b + 1) * q] = block
            if b != a:
                H[b * q:(b + 1) * q, a * q:(a + 1) * q] = block.T
    if ridge:
        idx = np.concatenate([np.arange(1, q) + a * q for a in range(K)])
        H[idx, idx] -= ridge
    return grad, H


def _separated(ll, H) -> bool:
    if ll > -SEPARATION_LOGLIK:
        return True
    eig = np.linalg.eigvalsh(-H)
    return eig[0] <= SEPARATION_COND * eig[-1]


def fit_gps(
    ds: Dataset,
    *,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
    ridge: float = 0.0,
) -> GpsModel:
    """Maximum-likelihood multinomial logit with intercept, by damped Newton-Raphson.

    Each Newton step is halved until the log-likelihood does not decrease.
    Non-convergence returns a model with ``converged=False``. Separation (a
    diverging coefficient norm, a numerically perfect fit or a singular
    information matrix) raises :class:`SeparationError`; ``ridge`` > 0
    penalizes the slopes instead.
    """
    Z, n = ds.Z, ds.n
    D = _design(ds.covariates)
    q = D.shape[1]
    if n <= Z * q:
        logger.warning("n=%d is not larger than Z*(P+1)=%d; fit may be unstable", n, Z * q)
    Wi = ds.treatments - 1
    Y = np.zeros((n, Z))
    Y[np.arange(n), Wi] = 1.0

    shares = Y.mean(axis=0)
    beta = np.zeros((Z - 1, q))
    beta[:, 0] = np.log(shares[:-1]) - np.log(shares[-1])

    ll = _loglik(D, Wi, beta, ridge)
    path = [ll]
    converged = False
    it = 0
    grad, H = _grad_hess(D, Y, beta, ridge)
    gnorm = np.max(np.abs(grad))
    while it < max_iter:
        if gnorm < tol:
            converged = True
            break
        it += 1
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, grad, rcond=None)[0]
        step = step.reshape(beta.shape)
        t = 1.0
        # near the optimum a full step can lose a few ulps of log-likelihood to rounding
        slack = LL_ROUNDING * max(1.0, abs(ll))
        for _ in range(MAX_HALVINGS):
            cand = beta + t * step
            ll_new = _loglik(D, Wi, cand, ridge)
            if ll_new >= ll - slack:
                break
            t *= 0.5
        else:
            logger.debug("step halving exhausted at iteration %d", it)
            break
        beta, ll = cand, ll_new
        path.append(ll)
        if np.linalg.norm(beta) > DIVERGENCE_NORM:
            raise SeparationError(
                f"coefficient norm {np.linalg.norm(beta):.3g} exceeds {DIVERGENCE_NORM:g}; "
                "treatment groups look separable (try ridge > 0)"
            )
        grad, H = _grad_hess(D, Y, beta, ridge)
        gnorm = np.max(np.abs(grad))
    if not converged and gnorm < tol:
        converged = True
    if not converged:
        logger.warning("multinomial logit did not converge: |grad|=%.3g after %d iterations", gnorm, it)

    if ridge == 0.0 and _separated(ll, H):
        raise SeparationError(
            f"fitted probabilities are numerically 0/1 (log-likelihood {ll:.3g}); "
            "treatment groups look separable (try ridge > 0)"
        )
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = None
    return GpsModel(
        coefficients=beta,
        scores=_probabilities(D, beta),
        converged=converged,
        iterations=it,
        loglik=float(ll),
        gradient_norm=float(gnorm),
        covariance=cov,
        ridge=ridge,
        loglik_path=tuple(path),
    )


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), CLAMP, 1.0 - CLAMP)
    return np.log(p) - np.log1p(-p)


def logit_scores(model: GpsModel) -> np.ndarray:
    """Entrywise logit of the fitted scores, clamped to [1e-12, 1 - 1e-12] first."""
    return logit(model.scores)


@dataclass
class OverlapReport:
    eta: float
    score_range: dict
    violations: list

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "score_range": {str(w): list(v) for w, v in self.score_range.items()},
            "violations": self.violations,
        }


def overlap_report(model: GpsModel, eta: float = 0.05) -> OverlapReport:
    """Flag units with any fitted score outside (eta, 1 - eta). Advisory only."""
    if not 0.0 < eta < 0.5:
        raise ValueError(f"eta must lie in (0, 0.5), got {eta}")
    S = model.scores
    score_range = {w + 1: (float(S[:, w].min()), float(S[:, w].max())) for w in range(S.shape[1])}
    flagged = np.flatnonzero(np.any((S >= 1.0 - eta) | (S <= eta), axis=1))
    return OverlapReport(eta, score_range, [int(i) for i in flagged])
