"""Monte Carlo harness: three-group factorial data generation and coverage metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .comparators import dr_att, ipw_att
from .data import Dataset, all_pairs
from .estimators import EstimationError
from .gps import SeparationError, fit_gps
from .inference import bonferroni_intervals, normal_quantile, quadratic_form, chi2_quantile
from .matching import MatchingError
from .pipeline import MatchingSettings, all_variants, match_reference, try_regressions

logger = logging.getLogger(__name__)

ESTIMATORS = ("B-N", "BC-N", "B-R", "BC-R", "IPW", "DR")
MAX_FAILURE_RATE = 0.05
Z = 3


@dataclass(frozen=True)
class SimConfig:
    """One cell of the factorial design. Group sizes are n1, gamma*n1, gamma^2*n1."""

    f: str = "normal"
    g: str = "identity"
    P: int = 3
    b: float = 0.0
    gamma: float = 1.0
    n1: int = 300
    sigma2sq: float = 1.0
    sigma3sq: float = 1.0
    lam: float = 0.0
    theta: float = 1.0
    replications: int = 100
    seed: int = 0
    m: int = 1
    J: int = 1
    K: int = 5
    alpha: float = 0.05
    estimators: tuple = ESTIMATORS
    standardize_t: bool = False
    redraw_beta: bool = False
    # raw within-group matching for sigma^2, as in the displayed estimator; "auto" uses residuals when possible
    sigma: str = "raw_match"
    # region radius from chi^2 with df = number of pairs ("pairs") or the covariance rank ("rank")
    region_df: str = "pairs"

    def __post_init__(self):
        if self.f not in ("normal", "t7"):
            raise ValueError(f"f must be 'normal' or 't7', got {self.f!r}")
        if self.g not in ("identity", "exp"):
            raise ValueError(f"g must be 'identity' or 'exp', got {self.g!r}")
        if self.P < 3 or self.P % 3:
            raise ValueError(f"P must be a positive multiple of 3, got {self.P}")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if self.sigma not in ("auto", "raw_match", "residual_corrected"):
            raise ValueError(f"unknown sigma method {self.sigma!r}")
        if self.region_df not in ("pairs", "rank"):
            raise ValueError(f"region_df must be 'pairs' or 'rank', got {self.region_df!r}")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for w in range(1, Z + 1):
            self.covariance(w)

    def group_sizes(self) -> tuple:
        return tuple(int(round(self.n1 * self.gamma ** p)) for p in range(Z))

    def mean(self, w: int) -> np.ndarray:
        base = np.zeros(Z)
        base[w - 1] = self.b
        return np.tile(base, self.P // 3)

    def covariance(self, w: int) -> np.ndarray:
        diag = (1.0, self.sigma2sq, self.sigma3sq)[w - 1]
        S = np.full((self.P, self.P), self.lam)
        np.fill_diagonal(S, diag)
        if np.linalg.eigvalsh(S)[0] <= 0:
            raise ValueError(f"covariance of group {w} is not positive definite (lambda={self.lam})")
        return S

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "estimators" in d:
            d["estimators"] = tuple(d["estimators"])
        return cls(**d)

    @property
    def cell_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SimData:
    dataset: Dataset
    potential: np.ndarray
    mu: np.ndarray
    beta: np.ndarray


def _g(cfg, X):
    return X if cfg.g == "identity" else np.exp(X)


def cell_beta(cfg: SimConfig) -> np.ndarray:
    """Response-surface coefficients beta_w ~ Uniform(-theta, theta), one row per treatment."""
    rng = np.random.default_rng([cfg.seed, 0])
    return rng.uniform(-cfg.theta, cfg.theta, size=(Z, cfg.P))


def generate_dataset(cfg: SimConfig, rep: int, beta: np.ndarray | None = None) -> SimData:
    rng = np.random.default_rng([cfg.seed, 1, rep])
    if cfg.redraw_beta:
        beta = rng.uniform(-cfg.theta, cfg.theta, size=(Z, cfg.P))
    elif beta is None:
        beta = cell_beta(cfg)
    blocks, labels = [], []
    for w, nw in enumerate(cfg.group_sizes(), start=1):
        L = np.linalg.cholesky(cfg.covariance(w))
        E = rng.standard_normal((nw, cfg.P)) @ L.T
        if cfg.f == "t7":
            E *= np.sqrt(7.0 / rng.chisquare(7, size=nw))[:, None]
            if cfg.standardize_t:
                E *= np.sqrt(5.0 / 7.0)
        blocks.append(cfg.mean(w) + E)
        labels.append(np.full(nw, w))
    X = np.vstack(blocks)
    W = np.concatenate(labels)
    mu = _g(cfg, X) @ beta.T
    potential = mu + rng.standard_normal(mu.shape)
    Y = potential[np.arange(len(W)), W - 1]
    return SimData(Dataset(X, W, Y, n_treatments=Z), potential, mu, beta)


def true_estimands(potential, treatments, t: int, pairs=None) -> np.ndarray:
    """Sample effects on group t computed from the full potential-outcome table."""
    potential = np.asarray(potential, dtype=float)
    pairs = all_pairs(potential.shape[1]) if pairs is None else pairs
    rows = np.asarray(treatments) == t
    return np.array([np.mean(potential[rows, j - 1] - potential[rows, k - 1]) for j, k in pairs])


def _interval_record(tau, cov, truth, alpha, region=True, region_df="pairs"):
    p = len(tau)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    z = normal_quantile(1.0 - alpha / (2 * p))
    rec = {
        "tau": tau.tolist(),
        "se": se.tolist(),
        "covered": (np.abs(tau - truth) <= z * se).tolist(),
        "width": (2 * z * se).tolist(),
        "region": None,
    }
    if region:
        # the pairwise covariance has rank Z-1; "pairs" keeps the chi^2_p radius regardless
        z2, rank = quadratic_form(tau - truth, cov, "pinv")
        df = p if region_df == "pairs" else rank
        rec["region"] = bool(z2 <= chi2_quantile(1.0 - alpha, df))
    return rec


def run_replication(cfg: SimConfig, rep: int, beta: np.ndarray | None = None) -> dict:
    """One replication with reference group 1: every requested estimator against the sample truth."""
    sim = generate_dataset(cfg, rep, beta)
    ds = sim.dataset
    t = 1
    pairs = all_pairs(Z)
    truth = true_estimands(sim.potential, ds.treatments, t, pairs)
    gps = fit_gps(ds)
    settings = MatchingSettings("vector", cfg.m, cfg.J, cfg.K, sigma=cfg.sigma,
                                seed=int(np.random.default_rng([cfg.seed, 2, rep]).integers(2**63)))
    regs = try_regressions(ds, False)
    out = {"truth": truth.tolist(), "gps_converged": gps.converged, "estimators": {}}
    wanted = set(cfg.estimators)
    if wanted & {"B-N", "BC-N", "B-R", "BC-R"}:
        matches = match_reference(ds, gps, t, settings)
        variants = all_variants(ds, gps, t, settings, matches=matches, regs=regs)
        for name in ("B-N", "BC-N", "B-R", "BC-R"):
            if name in wanted and name in variants:
                est = variants[name]
                out["estimators"][name] = _interval_record(est.tau_hat, est.covariance, truth, cfg.alpha,
                                                               region_df=cfg.region_df)
        # conditional bias of the basic estimator, known only in simulation
        true_bias = np.zeros(Z)
        rows = ds.group(t)
        for w in range(2, Z + 1):
            idx = matches.cross_matches[w][rows]
            true_bias[w - 1] = np.mean(sim.mu[rows, w - 1][:, None] - sim.mu[idx, w - 1])
        out["true_conditional_bias"] = true_bias.tolist()
        out["max_psi"] = int(matches.psi[:, t - 1].max())
    if "IPW" in wanted:
        est = ipw_att(ds, gps, t, pairs)
        out["estimators"]["IPW"] = _interval_record(est.tau_hat, est.covariance, truth, cfg.alpha, region=False)
        out["max_weight"] = est.max_weight
    if "DR" in wanted and regs is not None:
        est = dr_att(ds, gps, regs, t, pairs)
        out["estimators"]["DR"] = _interval_record(est.tau_hat, est.covariance, truth, cfg.alpha, region=False)
    return out


RECOVERABLE = (SeparationError, MatchingError, EstimationError, np.linalg.LinAlgError, ValueError, FloatingPointError)


def _safe_replication(cfg, rep, beta):
    try:
        return run_replication(cfg, rep, beta)
    except RECOVERABLE as exc:
        logger.info("replication %d of cell %s failed: %s", rep, cfg.cell_id, exc)
        return {"failed": f"{type(exc).__name__}: {exc}"}


@dataclass
class SimReport:
    cell_id: str
    config: dict
    replications: int
    failures: int
    metrics: dict
    true_tau_mean: list
    diagnostics: dict = field(default_factory=dict)
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        return cls(**d)


def _summarize(records: list, truths: np.ndarray) -> dict:
    tau = np.array([r["tau"] for r in records])
    se = np.array([r["se"] for r in records])
    cov = np.array([r["covered"] for r in records], dtype=float)
    width = np.array([r["width"] for r in records])
    err = tau - truths
    regions = [r["region"] for r in records if r["region"] is not None]
    bias = err.mean(axis=0)
    out = {
        "n": len(records),
        "region_coverage": float(np.mean(regions)) if regions else None,
        "interval_coverage_pairs": cov.mean(axis=0).tolist(),
        "interval_coverage": float(cov.mean()),
        "bias_pairs": bias.tolist(),
        "abs_bias": float(np.mean(np.abs(bias))),
        "median_abs_error": float(np.median(np.abs(err).mean(axis=1))),
        "width": float(width.mean()),
        "mean_se_pairs": se.mean(axis=0).tolist(),
        "se_ratio": None,
        "se_ratio_error": None,
    }
    if len(records) >= 2:
        sd = tau.std(axis=0, ddof=1)
        sd_err = err.std(axis=0, ddof=1)
        if np.all(sd > 0):
            out["se_ratio"] = float(np.mean(se.mean(axis=0) / sd))
        if np.all(sd_err > 0):
            out["se_ratio_error"] = float(np.mean(se.mean(axis=0) / sd_err))
    return out


def aggregate(cfg: SimConfig, results: list) -> SimReport:
    """Ordered reduction of replication results into cell metrics."""
    ok = [r for r in results if "failed" not in r]
    failures = len(results) - len(ok)
    metrics = {}
    truths = np.array([r["truth"] for r in ok]) if ok else np.empty((0, 3))
    for name in cfg.estimators:
        recs = [(r["estimators"][name], r["truth"]) for r in ok if name in r["estimators"]]
        if recs:
            metrics[name] = _summarize([a for a, _ in recs], np.array([b for _, b in recs]))
    diagnostics = {}
    if ok:
        diagnostics["gps_nonconverged"] = int(sum(not r["gps_converged"] for r in ok))
        if "true_conditional_bias" in ok[0]:
            diagnostics["mean_true_conditional_bias"] = np.mean(
                [r["true_conditional_bias"] for r in ok], axis=0).tolist()
            diagnostics["mean_max_psi"] = float(np.mean([r["max_psi"] for r in ok]))
        if "max_weight" in ok[0]:
            diagnostics["max_ipw_weight"] = float(max(r["max_weight"] for r in ok))
    if failures:
        diagnostics["failure_messages"] = sorted({r["failed"] for r in results if "failed" in r})[:5]
    status = "ok" if failures <= MAX_FAILURE_RATE * len(results) else "excess-failures"
    return SimReport(
        cell_id=cfg.cell_id,
        config=cfg.to_dict(),
        replications=len(results),
        failures=failures,
        metrics=metrics,
        true_tau_mean=truths.mean(axis=0).tolist() if len(truths) else [],
        diagnostics=diagnostics,
        status=status,
    )


def run_cell(cfg: SimConfig) -> SimReport:
    beta = None if cfg.redraw_beta else cell_beta(cfg)
    results = [_safe_replication(cfg, r, beta) for r in range(cfg.replications)]
    return aggregate(cfg, results)


class StoreError(RuntimeError):
    pass


class ResultsStore:
    """Append-only JSON-lines store of cell reports keyed by cell id."""

    FILENAME = "results.jsonl"

    def __init__(self, directory):
        self.directory = Path(directory)
        self.path = self.directory / self.FILENAME

    def load(self) -> dict[str, SimReport]:
        reports = {}
        if not self.path.exists():
            return reports
        with open(self.path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rep = SimReport.from_dict(rec)
                    if rep.cell_id != SimConfig.from_dict(rep.config).cell_id:
                        raise ValueError("cell id does not match its config")
                except (ValueError, TypeError, KeyError) as exc:
                    raise StoreError(
                        f"corrupt results store {self.path} at line {lineno}: {exc}; "
                        "remove the file (or the line) and rerun"
                    ) from None
                reports[rep.cell_id] = rep
        return reports

    def append(self, report: SimReport) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def run_factorial(grid: list, store=None, *, workers: int = 1, progress=None) -> list[SimReport]:
    """Run every cell not already in ``store``; returns reports in grid order.

    Cells run in a process pool when ``workers > 1``; results do not depend
    on the worker count.
    """
    if not grid:
        raise ValueError("empty grid")
    ids = [c.cell_id for c in grid]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate cells in grid: {dupes}")
    st = None if store is None else (store if isinstance(store, ResultsStore) else ResultsStore(store))
    done = st.load() if st else {}
    todo = [c for c in grid if c.cell_id not in done]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep in pool.map(run_cell, todo):
                done[rep.cell_id] = rep
                if st:
                    st.append(rep)
                if progress:
                    progress(rep)
    else:
        for cfg in todo:
            rep = run_cell(cfg)
            done[rep.cell_id] = rep
            if st:
                st.append(rep)
            if progress:
                progress(rep)
    return [done[i] for i in ids]


def derive_cell_seed(base_seed: int, cfg: SimConfig) -> int:
    key = json.dumps({k: v for k, v in cfg.to_dict().items() if k not in ("seed", "replications")},
                     sort_keys=True)
    digest = int(hashlib.sha1(key.encode()).hexdigest()[:8], 16)
    return int(np.random.SeedSequence([base_seed, digest]).generate_state(1, np.uint64)[0] >> 1)


def with_derived_seed(cfg: SimConfig, base_seed: int) -> SimConfig:
    return replace(cfg, seed=derive_cell_seed(base_seed, cfg))
