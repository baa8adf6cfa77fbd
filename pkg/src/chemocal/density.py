"""Model performance as a function of grain density: per-interval metrics
and cumulative minimum-density metrics, each reported as mean and SEM
across the ensemble constituents.

Bins are 0.05 wide over [0.1, 1.0], half-open on the right with the final
bin closed at 1.0.  The cumulative curve evaluates, for every threshold on
the same grid, the metric over all rows with at least that density; read
right-to-left it shows what a minimum-density requirement buys.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import PredictionSet, ReferenceTable
from .correct import acc, rmse
from .cube import Subsample
from .errors import DataError

LOW_COUNT = 5
# integer-centibin edges avoid float accumulation: 10, 15, ..., 100
_EDGES_PCT = list(range(10, 101, 5))

METRICS = ("rmse", "acc")


@dataclass
class DensityPoint:
    """One bin (lo, hi) or threshold (lo == hi) of a density sweep."""

    lo: float
    hi: float
    count: int
    mean: float
    sem: float
    low_count: bool


@dataclass
class DensitySweep:
    metric: str
    bins: list[DensityPoint]
    cumulative: list[DensityPoint]


@dataclass
class ConstituentSeries:
    """One constituent's predictions with densities and references."""

    density: np.ndarray
    y: np.ndarray
    yhat: np.ndarray


def _metric_fn(metric: str):
    if metric == "rmse":
        return rmse
    if metric == "acc":
        return acc
    raise DataError(f"unknown metric {metric!r}; options: {METRICS}")


def _aggregate(per_constituent_values: list[float]) -> tuple[float, float]:
    values = np.asarray(per_constituent_values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    return mean, float(values.std(ddof=1) / np.sqrt(values.size))


def binned_metric(series: list[ConstituentSeries], metric: str) -> list[DensityPoint]:
    """Metric per 0.05-wide density interval, averaged across constituents.

    Empty bins are absent; bins with fewer than 5 rows carry a low-count
    flag.
    """
    fn = _metric_fn(metric)
    if not series:
        raise DataError("no constituent predictions")
    if all(s.density.size == 0 for s in series):
        raise DataError("no prediction rows")
    out = []
    for j in range(len(_EDGES_PCT) - 1):
        lo = _EDGES_PCT[j] / 100.0
        hi = _EDGES_PCT[j + 1] / 100.0
        last = j == len(_EDGES_PCT) - 2
        per_constituent = []
        count = 0
        for s in series:
            sel = (s.density >= lo) & ((s.density <= hi) if last else (s.density < hi))
            if not np.any(sel):
                per_constituent = []
                break
            count = max(count, int(np.count_nonzero(sel)))
            per_constituent.append(fn(s.y[sel], s.yhat[sel]))
        if not per_constituent:
            continue
        mean, sem = _aggregate(per_constituent)
        out.append(DensityPoint(lo, hi, count, mean, sem, count < LOW_COUNT))
    return out


def cumulative_metric(series: list[ConstituentSeries], metric: str) -> list[DensityPoint]:
    """Metric over rows with density >= threshold, for every threshold on
    the 0.05 grid; thresholds above the maximum density are absent."""
    fn = _metric_fn(metric)
    if not series:
        raise DataError("no constituent predictions")
    out = []
    for pct in _EDGES_PCT:
        threshold = pct / 100.0
        per_constituent = []
        count = 0
        for s in series:
            sel = s.density >= threshold
            if not np.any(sel):
                per_constituent = []
                break
            count = max(count, int(np.count_nonzero(sel)))
            per_constituent.append(fn(s.y[sel], s.yhat[sel]))
        if not per_constituent:
            continue
        mean, sem = _aggregate(per_constituent)
        out.append(DensityPoint(threshold, threshold, count, mean, sem,
                                count < LOW_COUNT))
    return out


def constituent_series(pred_set: PredictionSet, subsamples: list[Subsample],
                       table: ReferenceTable, split: str = "test") -> list[ConstituentSeries]:
    """Join per-constituent prediction rows with subsample densities and
    bulk references for one split."""
    density_of = {ss.subsample_id: ss.density for ss in subsamples}
    per: dict[str, dict[str, list]] = {}
    for i in pred_set.constituent_rows(split=split):
        sid = pred_set.subsample_id[i]
        if sid not in density_of:
            raise DataError(f"prediction row references unknown subsample {sid}")
        rec = per.setdefault(pred_set.constituent[i],
                             {"density": [], "y": [], "yhat": []})
        rec["density"].append(density_of[sid])
        rec["y"].append(table[pred_set.bulk_id[i]])
        rec["yhat"].append(pred_set.yhat[i])
    if not per:
        raise DataError(f"no constituent predictions in split {split!r}")
    try:
        order = sorted(per, key=int)
    except ValueError:
        raise DataError("constituent labels must be integer indices") from None
    out = []
    for name in order:
        rec = per[name]
        numeric = isinstance(rec["yhat"][0], float)
        out.append(ConstituentSeries(
            density=np.asarray(rec["density"], dtype=np.float64),
            y=np.asarray(rec["y"], dtype=np.float64 if numeric else object),
            yhat=np.asarray(rec["yhat"], dtype=np.float64 if numeric else object),
        ))
    return out


def density_sweep(pred_set: PredictionSet, subsamples: list[Subsample],
                  table: ReferenceTable, metric: str,
                  split: str = "test") -> DensitySweep:
    series = constituent_series(pred_set, subsamples, table, split)
    return DensitySweep(metric=metric,
                        bins=binned_metric(series, metric),
                        cumulative=cumulative_metric(series, metric))


def classifier_density_report(pred_set: PredictionSet, subsamples: list[Subsample],
                              table: ReferenceTable,
                              split: str = "test") -> tuple[DensitySweep, DensityPoint | None]:
    """Accuracy sweep plus the lowest-density bin for headline comparison."""
    sweep = density_sweep(pred_set, subsamples, table, "acc", split)
    lowest = sweep.bins[0] if sweep.bins else None
    return sweep, lowest


def write_binned_csv(points: list[DensityPoint], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "metric_mean", "metric_sem"])
        for p in points:
            writer.writerow([repr(p.lo), repr(p.hi), p.count,
                             repr(p.mean), repr(p.sem)])


def write_cumulative_csv(points: list[DensityPoint], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["min_density", "count", "metric_mean", "metric_sem"])
        for p in points:
            writer.writerow([repr(p.lo), p.count, repr(p.mean), repr(p.sem)])
