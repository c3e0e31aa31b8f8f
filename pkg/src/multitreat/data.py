"""Observational dataset container, validation and discrete-covariate splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

MAX_DISCRETE_LEVELS = 10


class ValidationError(ValueError):
    """Raised when input data cannot be turned into a valid Dataset."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates, treatment labels (1..Z) and observed outcomes for n units.

    ``labels[w - 1]`` holds the original label of treatment ``w``.
    ``unit_ids`` are the row positions in the table the data came from.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    labels: tuple = ()
    covariate_names: tuple = ()
    unit_ids: np.ndarray | None = None
    n_treatments: int | None = None

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        W = np.asarray(self.treatments)
        Y = np.asarray(self.outcomes, dtype=float).ravel()
        n = len(Y)
        if X.shape[0] != n or W.shape != (n,):
            raise ValidationError(
                f"shape mismatch: covariates {X.shape}, treatments {W.shape}, outcomes {Y.shape}"
            )
        if not np.issubdtype(W.dtype, np.integer):
            if not np.all(np.mod(W, 1) == 0):
                raise ValidationError("treatments must be integer labels 1..Z")
            W = W.astype(np.int64)
        Z = int(self.n_treatments) if self.n_treatments is not None else int(W.max(initial=0))
        if n and (W.min() < 1 or W.max() > Z):
            raise ValidationError(f"treatment labels must lie in 1..{Z}")
        counts = np.bincount(W, minlength=Z + 1)[1:]
        if np.any(counts == 0):
            missing = [w for w in range(1, Z + 1) if counts[w - 1] == 0]
            raise ValidationError(f"treatment label(s) {missing} have no units")
        bad = np.argwhere(~np.isfinite(X))
        if len(bad):
            r, c = bad[0]
            raise ValidationError(f"non-finite covariate at row {r}, column {c}")
        bad_y = np.flatnonzero(~np.isfinite(Y))
        if len(bad_y):
            raise ValidationError(f"non-finite outcome at row {bad_y[0]}")
        labels = tuple(self.labels) if self.labels else tuple(range(1, Z + 1))
        if len(labels) != Z:
            raise ValidationError("one original label is needed per treatment")
        names = tuple(self.covariate_names) if self.covariate_names else tuple(
            f"x{p + 1}" for p in range(X.shape[1])
        )
        ids = np.arange(n) if self.unit_ids is None else np.asarray(self.unit_ids, dtype=np.int64)
        for arr in (X, W, Y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatments", W)
        object.__setattr__(self, "outcomes", Y)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "n_treatments", Z)

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def Z(self) -> int:
        return self.n_treatments

    @property
    def P(self) -> int:
        return self.covariates.shape[1]

    @property
    def group_sizes(self) -> dict[int, int]:
        counts = np.bincount(self.treatments, minlength=self.Z + 1)[1:]
        return {w: int(counts[w - 1]) for w in range(1, self.Z + 1)}

    def group(self, w: int) -> np.ndarray:
        """Indices of the units that received treatment ``w``."""
        return np.flatnonzero(self.treatments == w)

    def indicator(self, w: int) -> np.ndarray:
        return (self.treatments == w).astype(float)

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.covariates[rows],
            self.treatments[rows],
            self.outcomes[rows],
            labels=self.labels,
            covariate_names=self.covariate_names,
            unit_ids=self.unit_ids[rows],
            n_treatments=self.Z,
        )

    def to_frame(self, treatment: str = "treatment", outcome: str = "outcome") -> pd.DataFrame:
        """Table with original labels, suitable for :func:`validate`."""
        df = pd.DataFrame(self.covariates, columns=list(self.covariate_names))
        df[treatment] = [self.labels[w - 1] for w in self.treatments]
        df[outcome] = self.outcomes
        return df

    def equals(self, other: "Dataset") -> bool:
        return (
            self.labels == other.labels
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.treatments, other.treatments)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.outcomes, other.outcomes)
        )


@dataclass(frozen=True)
class EstimandSpec:
    """Reference group (a label, or ``"all"``) and the ordered list of pairs."""

    reference: int | str
    pairs: tuple = field(default=())

    @classmethod
    def for_treatments(cls, Z: int, reference: int | str = 1, pairs: Iterable | None = None):
        if pairs is None:
            pairs = all_pairs(Z)
        pairs = tuple(tuple(int(v) for v in p) for p in pairs)
        if len(set(pairs)) != len(pairs):
            raise ValidationError("pairs must be distinct")
        for j, k in pairs:
            if j == k or not (1 <= j <= Z and 1 <= k <= Z):
                raise ValidationError(f"invalid pair ({j}, {k}) for Z={Z}")
        if reference != "all" and not (1 <= int(reference) <= Z):
            raise ValidationError(f"invalid reference {reference!r}")
        return cls(reference if reference == "all" else int(reference), pairs)

    @property
    def is_all(self) -> bool:
        return self.reference == "all"


def all_pairs(Z: int) -> tuple:
    """Lexicographic pairs (1,2), (1,3), ..., (Z-1,Z)."""
    return tuple(combinations(range(1, Z + 1), 2))


def validate(
    raw,
    treatment: str,
    outcome: str,
    covariates: Sequence[str] | None = None,
) -> Dataset:
    """Build a Dataset from a table (DataFrame, dict of columns or list of row dicts).

    Treatment labels are recoded to 1..Z in order of first appearance.
    """
    df = raw if isinstance(raw, pd.DataFrame) else pd.DataFrame(raw)
    for col in (treatment, outcome):
        if col not in df.columns:
            raise ValidationError(f"missing column {col!r}")
    if covariates is None:
        covariates = [
            c for c in df.columns
            if c not in (treatment, outcome) and pd.api.types.is_numeric_dtype(df[c])
        ]
    else:
        covariates = list(covariates)
        missing = [c for c in covariates if c not in df.columns]
        if missing:
            raise ValidationError(f"missing covariate column(s) {missing}")

    labels_raw = df[treatment]
    if labels_raw.isna().any():
        raise ValidationError(f"missing treatment label at row {int(np.flatnonzero(labels_raw.isna())[0])}")
    order = list(pd.unique(labels_raw))
    if len(order) < 2:
        raise ValidationError("fewer than 2 treatments")
    code = {lab: w for w, lab in enumerate(order, start=1)}
    W = np.array([code[v] for v in labels_raw], dtype=np.int64)
    counts = np.bincount(W, minlength=len(order) + 1)[1:]
    small = [order[w] for w in range(len(order)) if counts[w] < 2]
    if small:
        raise ValidationError(f"treatment group(s) {small} have fewer than 2 units")

    y = pd.to_numeric(df[outcome], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(y))
    if len(bad):
        raise ValidationError(f"non-finite outcome at row {bad[0]} (column {outcome!r})")
    X = np.empty((len(df), len(covariates)))
    for p, c in enumerate(covariates):
        col = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(col))
        if len(bad):
            raise ValidationError(f"non-finite value at row {bad[0]}, column {c!r}")
        X[:, p] = col

    return Dataset(
        X, W, y,
        labels=tuple(_plain(v) for v in order),
        covariate_names=tuple(str(c) for c in covariates),
        n_treatments=len(order),
    )


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def subsample_by_discrete(ds: Dataset, column: int | str) -> list[Dataset]:
    """Split ``ds`` into one Dataset per distinct value of a discrete covariate.

    Every subsample keeps the full treatment coding and must contain every
    treatment; the column itself is retained (constant within a subsample).
    """
    if isinstance(column, str):
        try:
            column = ds.covariate_names.index(column)
        except ValueError:
            raise ValidationError(f"unknown covariate {column!r}") from None
    values = ds.covariates[:, column]
    levels = np.unique(values)
    if len(levels) > MAX_DISCRETE_LEVELS:
        raise ValidationError(
            f"column {ds.covariate_names[column]!r} has {len(levels)} distinct values "
            f"(> {MAX_DISCRETE_LEVELS}); treat it as continuous"
        )
    if len(levels) == 1:
        return [ds]
    return [ds.subset(np.flatnonzero(values == v)) for v in levels]
