"""Summary tables over simulation cells (coverage quantiles, coverage by factor, bias/width/SE ratio)."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .simulation import ESTIMATORS, SimReport

RECONSTRUCTED_NOTE = "factor levels beyond f, g, P, gamma, b are reconstructed defaults"


def cell_frame(reports: list[SimReport]) -> pd.DataFrame:
    """One row per (cell, estimator) with the cell's factors and metrics."""
    rows = []
    for rep in reports:
        cfg = rep.config
        for name in (e for e in ESTIMATORS if e in rep.metrics):
            met = rep.metrics[name]
            rows.append({
                "cell_id": rep.cell_id,
                "f": cfg["f"], "g": cfg["g"], "P": cfg["P"], "b": cfg["b"],
                "gamma": cfg["gamma"], "n1": cfg["n1"], "theta": cfg["theta"],
                "lam": cfg["lam"], "sigma2sq": cfg["sigma2sq"], "sigma3sq": cfg["sigma3sq"],
                "estimator": name,
                "region_coverage": met["region_coverage"],
                "interval_coverage": met["interval_coverage"],
                "abs_bias": met["abs_bias"],
                "width": met["width"],
                "se_ratio": met["se_ratio"],
                "replications": met["n"],
            })
    df = pd.DataFrame(rows)
    return df.astype({c: float for c in ("region_coverage", "se_ratio")}) if len(df) else df


def _q(s: pd.Series, q: float) -> float:
    s = s.dropna()
    return float(np.quantile(s, q)) if len(s) else float("nan")


def table1(df: pd.DataFrame) -> pd.DataFrame:
    """Median and quartiles of region and interval coverage per estimator."""
    out = []
    for name, grp in df.groupby("estimator", sort=False):
        out.append({
            "estimator": name,
            "region_median": _q(grp.region_coverage, 0.5),
            "region_q25": _q(grp.region_coverage, 0.25),
            "region_q75": _q(grp.region_coverage, 0.75),
            "interval_median": _q(grp.interval_coverage, 0.5),
            "interval_q25": _q(grp.interval_coverage, 0.25),
            "interval_q75": _q(grp.interval_coverage, 0.75),
        })
    return pd.DataFrame(out)


def table2(df: pd.DataFrame) -> pd.DataFrame:
    """Median region coverage by (gamma, b) with columns estimator x P."""
    sub = df[df.estimator.isin(["B-N", "BC-N", "B-R", "BC-R"])]
    piv = sub.pivot_table(index=["gamma", "b"], columns=["estimator", "P"],
                          values="region_coverage", aggfunc="median")
    order = [c for e in ("B-N", "BC-N", "B-R", "BC-R") for c in piv.columns if c[0] == e]
    return piv[order]


def table3(df: pd.DataFrame) -> pd.DataFrame:
    """Median interval coverage by b with columns estimator x f."""
    sub = df[df.estimator.isin(["B-N", "BC-N", "IPW", "DR"])]
    piv = sub.pivot_table(index="b", columns=["estimator", "f"],
                          values="interval_coverage", aggfunc="median")
    order = [c for e in ("B-N", "BC-N", "IPW", "DR") for c in piv.columns if c[0] == e]
    return piv[order]


def _median_iqr(s):
    return f"{_q(s, 0.5):.2f} ({_q(s, 0.75) - _q(s, 0.25):.2f})"


def table4(df: pd.DataFrame) -> pd.DataFrame:
    """Median |bias|, interval width (with IQR) and median SE ratio by b."""
    groups = {
        "Bias": [("B", "B-N", "abs_bias"), ("BC", "BC-N", "abs_bias"),
                 ("IPW", "IPW", "abs_bias"), ("DR", "DR", "abs_bias")],
        "Interval width": [("N", "B-N", "width"), ("R", "B-R", "width"),
                           ("IPW", "IPW", "width"), ("DR", "DR", "width")],
        "SE ratio": [("N", "B-N", "se_ratio"), ("R", "B-R", "se_ratio"),
                     ("IPW", "IPW", "se_ratio"), ("DR", "DR", "se_ratio")],
    }
    levels = sorted(df.b.unique())
    rows = []
    for section, items in groups.items():
        for label, est, col in items:
            sub = df[df.estimator == est]
            if sub.empty:
                continue
            row = {"section": section, "method": label}
            for b in levels:
                vals = sub[sub.b == b][col]
                row[f"b={b:g}"] = _median_iqr(vals) if section != "SE ratio" else f"{_q(vals, 0.5):.2f}"
            rows.append(row)
    return pd.DataFrame(rows)


TABLES = {1: table1, 2: table2, 3: table3, 4: table4}


def build_tables(reports: list[SimReport]) -> dict[int, pd.DataFrame]:
    if not reports:
        raise ValueError("no results to summarize")
    df = cell_frame(reports)
    return {k: fn(df) for k, fn in TABLES.items()}


def render(table: pd.DataFrame, title: str = "") -> str:
    text = table.to_string(float_format=lambda v: f"{v:.2f}")
    return f"{title}\n{text}\n" if title else text + "\n"


TITLES = {
    1: "Table 1: median and quartiles of region / interval coverage",
    2: "Table 2: median region coverage by gamma, b and P",
    3: "Table 3: median interval coverage by b and covariate distribution",
    4: "Table 4: median |bias| (IQR), interval width (IQR) and SE ratio by b",
}
