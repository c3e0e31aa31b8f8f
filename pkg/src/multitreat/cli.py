"""Command-line interface: ``analyze``, ``simulate`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import ValidationError, validate
from .estimators import EstimationError, estimate_ate
from .gps import SeparationError, fit_gps, overlap_report
from .inference import global_test
from .matching import KINDS, MatchingError, dump_matches
from .pipeline import MatchingSettings, estimate_reference, match_reference
from .variance import VarianceError

logger = logging.getLogger("multitreat")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (SeparationError, MatchingError, EstimationError, VarianceError, np.linalg.LinAlgError)


class ManifestError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)
    estimator: str = "bc"
    se: str = "new"
    matching: str = "vector"
    m: int = 1
    J: int = 1
    K: int = 5
    alpha: float = 0.05
    eta: float = 0.05
    seed: int | None = 0
    output: str = "."

    def check(self) -> None:
        for name, path in self.inputs.items():
            if path is not None and not Path(path).exists():
                raise ManifestError(f"{name} path {path} does not exist")
        if not 0.0 < self.alpha < 1.0:
            raise ManifestError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.eta < 0.5:
            raise ManifestError(f"eta must lie in (0, 0.5), got {self.eta}")
        for name in ("m", "J", "K"):
            if getattr(self, name) < 1:
                raise ManifestError(f"{name} must be >= 1")


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _resolve_reference(ref: str, labels: tuple):
    if ref == "all":
        return "all"
    for w, lab in enumerate(labels, start=1):
        if str(lab) == ref:
            return w
    try:
        w = int(ref)
    except ValueError:
        raise ValidationError(f"unknown reference group {ref!r}") from None
    if not 1 <= w <= len(labels):
        raise ValidationError(f"reference index {w} outside 1..{len(labels)}")
    return w


def _summary_lines(est, report, labels) -> list[str]:
    lines = [f"reference group: {labels[est.reference - 1]} (t={est.reference})",
             f"estimator: {est.variant.get('estimator')}, SE: {est.variant.get('se')}"]
    for iv, se in zip(report.pair_intervals, est.standard_errors):
        j, k = iv.pair
        lines.append(
            f"  tau[{labels[j - 1]} - {labels[k - 1]}] = {iv.estimate: .6g}  se {se:.4g}  "
            f"Bonferroni CI [{iv.lower:.6g}, {iv.upper:.6g}]"
        )
    lines.append(f"global test: z2 = {report.z2:.6g}, df = {report.df}, p = {report.p_value:.4g}")
    return lines


def analyze(man: RunManifest) -> int:
    man.check()
    data = pd.read_csv(man.inputs["data"], float_precision="round_trip")
    ds = validate(data, man.columns["treatment"], man.columns["outcome"], man.columns.get("covariates"))
    ref = _resolve_reference(man.columns.get("reference", "1"), ds.labels)
    out = Path(man.output)
    out.mkdir(parents=True, exist_ok=True)

    gps = fit_gps(ds)
    dump_json(overlap_report(gps, man.eta).to_dict() | {"gps_converged": gps.converged}, out / "overlap.json")
    settings = MatchingSettings(man.matching, man.m, man.J, man.K, seed=man.seed)
    refs = range(1, ds.Z + 1) if ref == "all" else [ref]
    estimates, reports, summary = [], [], []
    for t in refs:
        est = estimate_reference(ds, gps, t, settings, estimator=man.estimator, se=man.se)
        rep = global_test(est, alpha=man.alpha, singular="pinv")
        estimates.append(est)
        reports.append(rep)
        summary += _summary_lines(est, rep, ds.labels) + [""]
    if man.columns.get("dump_matches"):
        for t in refs:
            dump_matches(match_reference(ds, gps, t, settings), out / f"matches_t{t}.csv")

    if ref == "all":
        ate = estimate_ate(ds, estimates)
        dump_json({"ate": ate.to_dict(), "per_reference": [e.to_dict() for e in estimates]},
                  out / "estimate.json")
        dump_json({"per_reference": [r.to_dict() | {"reference": e.reference}
                                     for e, r in zip(estimates, reports)]}, out / "inference.json")
        summary.append("overall ATE (point estimates only):")
        for (j, k), v in zip(ate.pairs, ate.tau_hat):
            summary.append(f"  tau[{ds.labels[j - 1]} - {ds.labels[k - 1]}] = {v: .6g}")
    else:
        dump_json(estimates[0].to_dict(), out / "estimate.json")
        dump_json(reports[0].to_dict(), out / "inference.json")
    (out / "summary.txt").write_text("\n".join(summary).rstrip() + "\n")
    return EXIT_OK


def simulate(man: RunManifest, workers: int = 1) -> int:
    from .config import load_grid
    from .reporting import TITLES, build_tables, render
    from .simulation import ResultsStore, run_factorial

    man.check()
    grid = load_grid(man.inputs["grid"], seed=man.seed)
    store = ResultsStore(man.output)

    def progress(rep):
        logger.info("cell %s done (%d replications, %d failed)", rep.cell_id, rep.replications, rep.failures)

    reports = run_factorial(grid, store, workers=workers, progress=progress)
    _write_tables(build_tables(reports), Path(man.output), TITLES, render)
    return EXIT_OK


def _write_tables(tables, out: Path, titles, render, which=None) -> str:
    text = []
    for k, tab in tables.items():
        if which is not None and k != which:
            continue
        tab.to_csv(out / f"table{k}.csv")
        text.append(render(tab, titles[k]))
    joined = "\n".join(text)
    if which is None:
        (out / "tables.txt").write_text(joined)
    return joined


def report(man: RunManifest, which: int | None = None) -> int:
    from .reporting import TITLES, build_tables, render
    from .simulation import ResultsStore

    man.check()
    reports = list(ResultsStore(man.inputs["store"]).load().values())
    if not reports:
        raise ValidationError(f"results store {man.inputs['store']} is empty")
    sys.stdout.write(_write_tables(build_tables(reports), Path(man.inputs["store"]), TITLES, render, which))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multitreat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate pairwise effects from a CSV file")
    a.add_argument("--data", required=True)
    a.add_argument("--treatment", required=True)
    a.add_argument("--outcome", required=True)
    a.add_argument("--covariates", help="comma-separated covariate columns (default: all other numeric)")
    a.add_argument("--reference", default="1", help="reference label or index, or 'all'")
    a.add_argument("--estimator", choices=["basic", "bc"], default="bc")
    a.add_argument("--se", choices=["new", "randomization"], default="new")
    a.add_argument("--matching", choices=["vector", *KINDS], default="vector")
    a.add_argument("--m", type=int, default=1)
    a.add_argument("--J", type=int, default=1)
    a.add_argument("--K", type=int, default=5)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--eta", type=float, default=0.05)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="multitreat_out")
    a.add_argument("--dump-matches", action="store_true")

    s = sub.add_parser("simulate", help="run a factorial simulation grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int)

    r = sub.add_parser("report", help="summary tables from a results store")
    r.add_argument("--store", required=True)
    r.add_argument("--table", type=int, choices=[1, 2, 3, 4])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        if args.command == "analyze":
            cols = {"treatment": args.treatment, "outcome": args.outcome, "reference": args.reference,
                    "dump_matches": args.dump_matches}
            if args.covariates:
                cols["covariates"] = [c.strip() for c in args.covariates.split(",") if c.strip()]
            man = RunManifest("analyze", {"data": args.data}, cols, args.estimator, args.se,
                              args.matching, args.m, args.J, args.K, args.alpha, args.eta,
                              args.seed, args.out)
            return analyze(man)
        if args.command == "simulate":
            man = RunManifest("simulate", {"grid": args.grid}, seed=args.seed, output=args.out)
            return simulate(man, args.workers)
        man = RunManifest("report", {"store": args.store})
        return report(man, args.table)
    except (ValidationError, ManifestError) as exc:
        print(f"error [{stage}: validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as exc:
        print(f"error [{stage}: numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:
        from .config import ConfigError
        from .simulation import StoreError

        if isinstance(exc, (ConfigError, StoreError)):
            print(f"error [{stage}: configuration]: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        raise


if __name__ == "__main__":
    sys.exit(main())
