"""Regression metrics, the closed-form bias/scale fit between predictions
and references, the residual standard error about that line (sYX, with
n-2 degrees of freedom), and linear correction of bulk-mean predictions
using train- or validation-derived parameters.

Corrections fitted on the test split are rejected: applying them would
leak test information into the reported numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import (SPLIT_ORDER, BulkAggregate, PredictionSet, ReferenceTable,
                    aggregate_bulk_means)
from .errors import DataError


def rmse(y: np.ndarray, yhat: np.ndarray) -> float:
    """Root mean squared error."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise DataError("rmse: length mismatch")
    if y.size == 0:
        raise DataError("rmse: empty input")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def acc(y, yhat) -> float:
    """Fraction of exact matches."""
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise DataError("acc: length mismatch")
    if y.size == 0:
        raise DataError("acc: empty input")
    return float(np.mean(y == yhat))


@dataclass
class LinearFit:
    """Bias/scale pair mapping predictions onto references, with residuals
    and the n-2 degree-of-freedom residual standard error."""

    bias: float
    scale: float
    residuals: np.ndarray
    syx: float | None
    source_split: str
    level: str = "bm"

    @property
    def n(self) -> int:
        return self.residuals.size


def ols_fit(yhat: np.ndarray, y: np.ndarray, source_split: str = "train",
            level: str = "bm") -> LinearFit:
    """Least-squares (bias, scale) so that y ~ bias + scale * yhat.

    Solved in the numerically stable centered form (slope from
    covariance over variance, intercept backed out), which equals the
    normal-equation solution with an intercept column in exact arithmetic.
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape or yhat.ndim != 1:
        raise DataError("ols_fit expects two equal-length vectors")
    n = yhat.size
    if n < 2:
        raise DataError("ols_fit needs at least 2 points")
    xm = yhat.mean()
    ym = y.mean()
    dx = yhat - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DataError("ols_fit: constant predictions make the normal equations singular")
    scale = float(dx @ (y - ym)) / sxx
    bias = float(ym - scale * xm)
    residuals = y - (scale * yhat + bias)
    syx_val = None
    if n >= 3:
        syx_val = float(np.sqrt(float(residuals @ residuals) / (n - 2)))
    return LinearFit(bias=bias, scale=scale, residuals=residuals,
                     syx=syx_val, source_split=source_split, level=level)


def syx(y: np.ndarray, yhat: np.ndarray) -> float:
    """Residual standard error about the fitted line: sqrt(SSE / (n-2))."""
    y = np.asarray(y, dtype=np.float64)
    if y.size < 3:
        raise DataError("syx needs at least 3 points (n-2 degrees of freedom)")
    fit = ols_fit(yhat, y)
    return fit.syx


def apply_correction(yhat: np.ndarray, fit: LinearFit) -> np.ndarray:
    """Element-wise yhat * scale + bias; rejects test-derived parameters."""
    if fit.source_split not in ("train", "val"):
        raise DataError("correction parameters must come from the train or val split, "
                        f"not {fit.source_split!r}")
    return np.asarray(yhat, dtype=np.float64) * fit.scale + fit.bias


# ---------------------------------------------------------------------------
# Report

def _fit_stats(y: np.ndarray, yhat: np.ndarray, split: str, level: str) -> dict:
    """RMSE always; line-fit statistics only when the split supports them
    (>= 2 points, non-constant predictions)."""
    stats = {"n": int(y.size), "rmse": rmse(y, yhat), "syx": None,
             "bias": None, "scale": None, "inv_bias": None, "inv_scale": None}
    if y.size >= 2 and float(np.ptp(yhat)) > 0.0:
        fit = ols_fit(yhat, y, source_split=split, level=level)
        stats.update(syx=fit.syx, bias=fit.bias, scale=fit.scale)
        if fit.scale != 0.0:
            stats.update(inv_bias=-fit.bias / fit.scale, inv_scale=1.0 / fit.scale)
    return stats


def correction_report(pred_set: PredictionSet, table: ReferenceTable,
                      sources: tuple[str, ...] = ("train", "val")) -> dict:
    """Bulk-mean and subsample-level fit statistics per split, plus the
    test-split RMSE after correcting with each requested source split.

    The inverse (``inv_*``) parameters describe the reference-to-prediction
    line used for plotting; the correction itself always maps predictions
    onto references.
    """
    for source in sources:
        if source not in ("train", "val"):
            raise DataError(f"correction source must be train or val, not {source!r}")
    present = pred_set.splits_present()
    for split in SPLIT_ORDER:
        if split not in present:
            raise DataError(f"prediction set is missing the {split} split")

    aggregates = aggregate_bulk_means(pred_set, table)
    report: dict = {"bm": {}, "ss": {}, "corrected_test": {}}
    bm_fits: dict[str, LinearFit] = {}
    for split in SPLIT_ORDER:
        rows = [r for r in aggregates if r.split == split]
        y = np.array([r.y_ref for r in rows])
        yhat = np.array([r.yhat_mean for r in rows])
        report["bm"][split] = _fit_stats(y, yhat, split, "bm")
        if report["bm"][split]["scale"] is not None:
            bm_fits[split] = ols_fit(yhat, y, source_split=split, level="bm")

        idx = pred_set.ensemble_rows(split=split)
        y_ss = np.array([table[pred_set.bulk_id[i]] for i in idx], dtype=np.float64)
        yhat_ss = np.array([pred_set.yhat[i] for i in idx], dtype=np.float64)
        report["ss"][split] = _fit_stats(y_ss, yhat_ss, split, "ss")

    test_rows = [r for r in aggregates if r.split == "test"]
    y_test = np.array([r.y_ref for r in test_rows])
    yhat_test = np.array([r.yhat_mean for r in test_rows])
    for source in sources:
        if source not in bm_fits:
            raise DataError(f"cannot fit correction parameters on the {source} split")
        corrected = apply_correction(yhat_test, bm_fits[source])
        report["corrected_test"][f"{source}_sourced"] = {
            "n": int(y_test.size),
            "rmse": rmse(y_test, corrected),
            "bias": bm_fits[source].bias,
            "scale": bm_fits[source].scale,
        }
    return report


def corrected_bulk_aggregates(aggregates: list[BulkAggregate],
                              fit: LinearFit) -> list[BulkAggregate]:
    """Test-split aggregates with the linear correction applied (SEM scales
    with the fit's slope)."""
    out = []
    for r in aggregates:
        if r.split != "test":
            continue
        out.append(BulkAggregate(
            bulk_id=r.bulk_id, split=r.split, y_ref=r.y_ref,
            yhat_mean=float(r.yhat_mean * fit.scale + fit.bias),
            sem=None if r.sem is None else abs(fit.scale) * r.sem,
            n_subsamples=r.n_subsamples, n_constituents=r.n_constituents))
    return out


def write_report_json(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
