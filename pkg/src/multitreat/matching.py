"""Nearest-neighbor matching with replacement across and within treatment groups.

All searches break distance ties by the lowest unit index. The exhaustive
scan is the reference path; the kd-tree path is an accelerator that falls
back to the scan for any row where a tie makes its answer ambiguous.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset, EstimandSpec
from .gps import GpsModel, logit_scores

KINDS = ("logit-gps-euclid", "mahalanobis-covariates", "euclid-covariates")
KDTREE_MAX_DIM = 10
KDTREE_MIN_CANDIDATES = 64
_BLOCK_ELEMENTS = 1 << 22


class MatchingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Metric:
    """Distance between units, evaluated blockwise.

    ``points`` is an embedding in which the distance is Euclidean (used by
    the kd-tree path). Mahalanobis distances are evaluated from the quadratic
    form directly; ``points`` then holds the whitened covariates.
    """

    kind: str
    points: np.ndarray | None = None
    precision: np.ndarray | None = None
    raw: np.ndarray | None = None
    matrix: np.ndarray | None = None

    @classmethod
    def from_points(cls, points, kind="euclid"):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        return cls(kind, points=pts)

    @classmethod
    def from_matrix(cls, matrix, kind="precomputed"):
        M = np.asarray(matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise MatchingError("precomputed distances must be a square matrix")
        return cls(kind, matrix=M)

    @property
    def dim(self) -> int | None:
        return None if self.points is None else self.points.shape[1]

    def block(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        if self.matrix is not None:
            return self.matrix[np.ix_(rows, cols)]
        src = self.raw if self.precision is not None else self.points
        A, B = src[rows], src[cols]
        out = np.empty((len(rows), len(cols)))
        step = max(1, _BLOCK_ELEMENTS // max(1, len(cols) * A.shape[1]))
        for s in range(0, len(rows), step):
            diff = A[s:s + step, None, :] - B[None, :, :]
            if self.precision is not None:
                q = np.einsum("rcp,pq,rcq->rc", diff, self.precision, diff)
                out[s:s + step] = np.sqrt(np.maximum(q, 0.0))
            else:
                out[s:s + step] = np.sqrt(np.einsum("rcp,rcp->rc", diff, diff))
        return out

    def __call__(self, i: int, j: int) -> float:
        return float(self.block([i], [j])[0, 0])


def distance_matrix(ds: Dataset, gps: GpsModel | None, kind: str) -> Metric:
    """Metric over units: logit-GPS Euclidean, or (Mahalanobis/Euclidean) on covariates."""
    if kind == "logit-gps-euclid":
        if gps is None:
            raise MatchingError("logit-gps-euclid needs a fitted GPS model")
        return Metric(kind, points=logit_scores(gps))
    if kind == "euclid-covariates":
        return Metric(kind, points=ds.covariates)
    if kind == "mahalanobis-covariates":
        S = np.atleast_2d(np.cov(ds.covariates, rowvar=False))
        eig = np.linalg.eigvalsh(S)
        if eig[0] <= 1e-12 * max(1.0, eig[-1]):
            raise MatchingError(f"covariate covariance is singular (smallest eigenvalue {eig[0]:.3g})")
        prec = np.linalg.inv(S)
        prec = 0.5 * (prec + prec.T)
        L = np.linalg.cholesky(prec)
        return Metric(kind, points=ds.covariates @ L, precision=prec, raw=ds.covariates)
    raise MatchingError(f"unknown distance kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Match sets and reuse counts.

    ``cross_matches[w]`` is an n x m index array: row i holds M_i^w (nearest
    first) or -1 where unit i does not impute treatment w. ``within_matches``
    is n x J with L_i^{W_i}. ``psi[i, w-1]`` counts how often unit i serves as
    a match for units of group w.
    """

    n: int
    Z: int
    m: int
    cross_matches: dict = field(default_factory=dict)
    psi: np.ndarray | None = None
    within_matches: np.ndarray | None = None
    J: int | None = None
    distance_spec: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict, repr=False)

    def match_set(self, i: int, w: int) -> np.ndarray | None:
        arr = self.cross_matches.get(w)
        if arr is None or arr[i, 0] < 0:
            return None
        return arr[i]

    def imputing_units(self, w: int) -> np.ndarray:
        arr = self.cross_matches.get(w)
        return np.empty(0, dtype=np.int64) if arr is None else np.flatnonzero(arr[:, 0] >= 0)

    def with_within(self, other: "MatchResult") -> "MatchResult":
        """Copy of this result carrying ``other``'s within-group matches."""
        spec = dict(self.distance_spec)
        spec["within"] = other.distance_spec.get("within", other.distance_spec)
        return replace(self, within_matches=other.within_matches, J=other.J, distance_spec=spec)


def _psi(treatments: np.ndarray, cross: dict, n: int, Z: int, m: int) -> np.ndarray:
    psi = np.zeros((n, Z), dtype=np.int64)
    for w, arr in cross.items():
        rows = np.flatnonzero(arr[:, 0] >= 0)
        if len(rows) == 0:
            continue
        np.add.at(psi, (arr[rows].ravel(), np.repeat(treatments[rows] - 1, m)), 1)
    return psi


def _brute(metric: Metric, rows, cands, k, exclude_self):
    D = metric.block(rows, cands)
    if exclude_self:
        D[rows[:, None] == cands[None, :]] = np.inf
    if k == 1:
        return cands[np.argmin(D, axis=1)][:, None]
    order = np.argsort(D, axis=1, kind="stable")[:, :k]
    return cands[order]


def _kdtree(metric: Metric, rows, cands, k, exclude_self):
    extra = k + 1 + int(exclude_self)
    tree = cKDTree(metric.points[cands])
    d, ix = tree.query(metric.points[rows], k=extra)
    d = np.atleast_2d(d).reshape(len(rows), extra)
    gi = cands[np.atleast_2d(ix).reshape(len(rows), extra)]
    fallback = np.zeros(len(rows), dtype=bool)
    if exclude_self:
        is_self = gi == rows[:, None]
        has_self = is_self.any(axis=1)
        keep = ~is_self
        keep[~has_self, -1] = False
        gi = gi[keep].reshape(len(rows), extra - 1)
        d = d[keep].reshape(len(rows), extra - 1)
        fallback |= ~has_self
    fallback |= np.any(d[:, 1:k + 1] == d[:, :k], axis=1)
    out = gi[:, :k].copy()
    if fallback.any():
        out[fallback] = _brute(metric, rows[fallback], cands, k, exclude_self)
    return out


def nearest(metric: Metric, rows, cands, k: int, *, exclude_self=False, method="auto"):
    """The k nearest candidates for each row, nearest first, lowest index on ties."""
    rows = np.asarray(rows, dtype=np.int64)
    cands = np.sort(np.asarray(cands, dtype=np.int64))
    if len(rows) == 0:
        return np.empty((0, k), dtype=np.int64)
    if method == "auto":
        usable = metric.points is not None and metric.dim <= KDTREE_MAX_DIM
        method = "kdtree" if usable and len(cands) >= KDTREE_MIN_CANDIDATES else "brute"
    if method == "kdtree":
        if metric.points is None:
            raise MatchingError("kd-tree search needs a point embedding")
        if len(cands) >= k + 1 + int(exclude_self):
            return _kdtree(metric, rows, cands, k, exclude_self)
    elif method != "brute":
        raise MatchingError(f"unknown search method {method!r}")
    return _brute(metric, rows, cands, k, exclude_self)


def _scope(ds: Dataset, scope) -> EstimandSpec:
    if isinstance(scope, EstimandSpec):
        return scope
    return EstimandSpec.for_treatments(ds.Z, scope)


def knn_match(ds: Dataset, distances, m: int = 1, scope=1, *, method="auto") -> MatchResult:
    """Match each imputing unit to its m nearest units in every other group.

    ``scope`` is a reference label t (group-t units impute every w != t), the
    string ``"all"`` (every unit imputes every other treatment) or an
    :class:`EstimandSpec`. ``distances`` is a :class:`Metric` or an n x n array.
    """
    metric = distances if isinstance(distances, Metric) else Metric.from_matrix(distances)
    spec = _scope(ds, scope)
    if m < 1:
        raise MatchingError("m must be >= 1")
    sizes = ds.group_sizes
    if spec.is_all:
        imputers = {w: np.flatnonzero(ds.treatments != w) for w in range(1, ds.Z + 1)}
    else:
        t = spec.reference
        imputers = {w: ds.group(t) for w in range(1, ds.Z + 1) if w != t}
    for w in imputers:
        if sizes[w] < m:
            raise MatchingError(f"group {w} has {sizes[w]} units, fewer than m={m}")
    cross = {}
    for w, rows in imputers.items():
        arr = np.full((ds.n, m), -1, dtype=np.int64)
        arr[rows] = nearest(metric, rows, ds.group(w), m, method=method)
        cross[w] = arr
    return MatchResult(
        n=ds.n, Z=ds.Z, m=m, cross_matches=cross,
        psi=_psi(ds.treatments, cross, ds.n, ds.Z, m),
        distance_spec={"kind": metric.kind, "scope": spec.reference, "method": method},
    )


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    return centers


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int


def kmeans(points, K: int, *, n_init: int = 10, seed=None, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia.

    A run stops when assignments no longer change. Empty clusters keep their
    previous center.
    """
    if K < 1:
        raise MatchingError("K must be >= 1")
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    K = min(K, len(X))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeanspp(X, K, rng)
        labels = None
        for it in range(1, max_iter + 1):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            counts = np.bincount(labels, minlength=K)
            for p in range(X.shape[1]):
                sums = np.bincount(labels, weights=X[:, p], minlength=K)
                nz = counts > 0
                centers[nz, p] = sums[nz] / counts[nz]
        inertia = float(d2[np.arange(len(X)), labels].sum())
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels.copy(), centers.copy(), inertia, it)
    return best


def vector_match(
    ds: Dataset,
    gps: GpsModel,
    t: int,
    m: int = 1,
    clusters: int = 5,
    *,
    n_init: int = 10,
    seed=0,
) -> MatchResult:
    """Vector matching of reference group ``t`` to every other group.

    For each target w, all units are k-means clustered on the logits of the
    GPS components other than t and w; each group-t unit is then matched, within
    its cluster, to the m group-w units closest on logit r(w, X). A cluster with
    fewer than m group-w units falls back to the whole group.
    """
    if gps is None:
        raise MatchingError("vector matching needs a fitted GPS model")
    if clusters < 1:
        raise MatchingError("number of clusters must be >= 1")
    if m < 1:
        raise MatchingError("m must be >= 1")
    sizes = ds.group_sizes
    for w, nw in sizes.items():
        if w != t and nw < m:
            raise MatchingError(f"group {w} has {nw} units, fewer than m={m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L = logit_scores(gps)
    t_units = ds.group(t)
    cross, labels_by_w = {}, {}
    for w in range(1, ds.Z + 1):
        if w == t:
            continue
        comps = [c for c in range(ds.Z) if c not in (t - 1, w - 1)]
        if comps and clusters > 1:
            labels = kmeans(L[:, comps], clusters, n_init=n_init, seed=rng).labels
        else:
            labels = np.zeros(ds.n, dtype=np.int64)
        labels_by_w[w] = labels
        metric = Metric.from_points(L[:, w - 1], kind=f"logit-gps-{w}")
        w_units = ds.group(w)
        arr = np.full((ds.n, m), -1, dtype=np.int64)
        for c in np.unique(labels[t_units]):
            rows = t_units[labels[t_units] == c]
            cands = w_units[labels[w_units] == c]
            if len(cands) < m:
                cands = w_units
            arr[rows] = nearest(metric, rows, cands, m, method="brute")
        cross[w] = arr
    return MatchResult(
        n=ds.n, Z=ds.Z, m=m, cross_matches=cross,
        psi=_psi(ds.treatments, cross, ds.n, ds.Z, m),
        distance_spec={"kind": "vector", "scope": t, "clusters": clusters, "n_init": n_init},
        clusters=labels_by_w,
    )


def within_group_match(
    ds: Dataset, gps: GpsModel | None, J: int = 1, *, metric: Metric | None = None, method="auto"
) -> MatchResult:
    """J nearest same-group units (self excluded) for every unit, on the logit-GPS vector."""
    if J < 1:
        raise MatchingError("J must be >= 1")
    if metric is None:
        metric = distance_matrix(ds, gps, "logit-gps-euclid")
    for w, nw in ds.group_sizes.items():
        if nw < J + 1:
            raise MatchingError(f"group {w} has {nw} units, fewer than J+1={J + 1}")
    within = np.empty((ds.n, J), dtype=np.int64)
    for w in range(1, ds.Z + 1):
        G = ds.group(w)
        within[G] = nearest(metric, G, G, J, exclude_self=True, method=method)
    return MatchResult(
        n=ds.n, Z=ds.Z, m=0, psi=np.zeros((ds.n, ds.Z), dtype=np.int64),
        within_matches=within, J=J,
        distance_spec={"within": {"kind": metric.kind, "J": J}},
    )


def dump_matches(result: MatchResult, path, metric: Metric | None = None) -> None:
    """Write match sets as CSV rows: unit, target_group, matches, distances."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["unit", "target_group", "matches", "distances"])
        for w in sorted(result.cross_matches):
            for i in result.imputing_units(w):
                idx = result.cross_matches[w][i]
                dist = "" if metric is None else ";".join(repr(metric(i, j)) for j in idx)
                out.writerow([i, w, ";".join(str(j) for j in idx), dist])
        if result.within_matches is not None:
            for i, idx in enumerate(result.within_matches):
                dist = "" if metric is None else ";".join(repr(metric(i, j)) for j in idx)
                out.writerow([i, "within", ";".join(str(j) for j in idx), dist])
