"""Spectral preprocessing: SNV, Savitzky-Golay derivative filtering and
train-statistic centering, composable into an ordered pipeline.

Row-wise steps (SNV, SavGol) are stateless; centering steps store the
training-set statistics at fit time and reuse them on validation/test
data, never recomputing them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .errors import DataError


def snv(x: np.ndarray) -> np.ndarray:
    """Standard Normal Variate: per spectrum, subtract the mean and divide
    by the sample standard deviation (divisor n-1)."""
    x = np.asarray(x, dtype=np.float64)
    arr = np.atleast_2d(x)
    if arr.shape[1] < 2:
        raise DataError("SNV needs at least 2 bands")
    mean = arr.mean(axis=1, keepdims=True)
    std = arr.std(axis=1, ddof=1, keepdims=True)
    if np.any(std == 0):
        raise DataError("SNV undefined for zero-variance spectrum")
    out = (arr - mean) / std
    return out[0] if x.ndim == 1 else out


def savgol(x: np.ndarray, window: int = 7, polyorder: int = 2,
           derivorder: int = 2) -> np.ndarray:
    """Savitzky-Golay derivative filter at unit channel spacing.

    Edge outputs come from one-sided least-squares fits over the nearest
    ``window`` points, so output length equals input length.
    """
    _check_savgol_params(window, polyorder, derivorder)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < window:
        raise DataError(f"savgol needs at least {window} bands, got {x.shape[-1]}")
    return savgol_filter(x, window_length=window, polyorder=polyorder,
                         deriv=derivorder, delta=1.0, axis=-1, mode="interp")


def _check_savgol_params(window: int, polyorder: int, derivorder: int) -> None:
    if window % 2 == 0 or window <= polyorder:
        raise DataError("SavGol window must be odd and greater than polyorder")
    if derivorder > polyorder:
        raise DataError("SavGol derivative order must not exceed polyorder")
    if derivorder < 0 or polyorder < 0:
        raise DataError("SavGol orders must be non-negative")


@dataclass(frozen=True)
class Snv:
    """SNV step marker."""


@dataclass(frozen=True)
class SavGol:
    window: int = 7
    polyorder: int = 2
    derivorder: int = 2

    def __post_init__(self):
        _check_savgol_params(self.window, self.polyorder, self.derivorder)


@dataclass
class CenterX:
    """Column centering with training-set column means."""

    means: np.ndarray | None = None


@dataclass
class CenterY:
    """Reference centering with the training-set mean reference."""

    mean: float | None = None


Step = Snv | SavGol | CenterX | CenterY


@dataclass
class CenterStats:
    """Training statistics captured by fit_center."""

    x_means: np.ndarray
    y_mean: float | None


def fit_center(train_matrix: np.ndarray, train_refs: np.ndarray | None = None) -> CenterStats:
    """Column means of the training spectra plus the mean training reference."""
    train_matrix = np.asarray(train_matrix, dtype=np.float64)
    if train_matrix.ndim != 2 or train_matrix.shape[0] < 1:
        raise DataError("fit_center needs a non-empty 2-D matrix")
    y_mean = None
    if train_refs is not None:
        train_refs = np.asarray(train_refs, dtype=np.float64)
        if train_refs.size < 1:
            raise DataError("fit_center got empty references")
        y_mean = float(train_refs.mean())
    return CenterStats(x_means=train_matrix.mean(axis=0), y_mean=y_mean)


class PreprocPipeline:
    """Ordered list of preprocessing steps applied row-wise (SNV, SavGol)
    or column-wise (centering)."""

    def __init__(self, steps: list[Step] | None = None):
        self.steps: list[Step] = list(steps) if steps else []

    def __repr__(self):
        return f"PreprocPipeline({self.steps!r})"

    def copy(self) -> "PreprocPipeline":
        return PreprocPipeline(copy.deepcopy(self.steps))

    @property
    def fitted(self) -> bool:
        for step in self.steps:
            if isinstance(step, CenterX) and step.means is None:
                return False
            if isinstance(step, CenterY) and step.mean is None:
                return False
        return True

    def fit(self, matrix: np.ndarray, refs: np.ndarray | None = None) -> "PreprocPipeline":
        """Run the row-wise steps in order, capturing centering statistics
        at their position in the chain."""
        if not any(isinstance(s, (CenterX, CenterY)) for s in self.steps):
            return self  # nothing to fit; row-wise steps are stateless
        current = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        for step in self.steps:
            if isinstance(step, CenterX):
                step.means = current.mean(axis=0)
                current = current - step.means
            elif isinstance(step, CenterY):
                if refs is None:
                    raise DataError("CenterY step needs training references to fit")
                step.mean = float(np.asarray(refs, dtype=np.float64).mean())
            else:
                current = self._apply_step(step, current)
        return self

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        """Apply all steps in declared order using stored statistics."""
        if not self.fitted:
            raise DataError("pipeline has unfitted centering steps")
        x = np.asarray(matrix, dtype=np.float64)
        current = np.atleast_2d(x)
        for step in self.steps:
            if isinstance(step, CenterX):
                if current.shape[1] != step.means.size:
                    raise DataError("band count does not match fitted centering")
                current = current - step.means
            elif isinstance(step, CenterY):
                continue
            else:
                current = self._apply_step(step, current)
        return current[0] if x.ndim == 1 else current

    def apply_refs(self, refs: np.ndarray) -> np.ndarray:
        """Center references when a CenterY step is present, else identity."""
        refs = np.asarray(refs, dtype=np.float64)
        for step in self.steps:
            if isinstance(step, CenterY):
                if step.mean is None:
                    raise DataError("pipeline has unfitted centering steps")
                refs = refs - step.mean
        return refs

    @staticmethod
    def _apply_step(step: Step, current: np.ndarray) -> np.ndarray:
        if isinstance(step, Snv):
            return snv(current)
        if isinstance(step, SavGol):
            return savgol(current, step.window, step.polyorder, step.derivorder)
        raise DataError(f"unknown pipeline step {step!r}")

    # -- serialization ------------------------------------------------------

    def to_json_obj(self) -> list[dict]:
        out = []
        for step in self.steps:
            if isinstance(step, Snv):
                out.append({"kind": "snv"})
            elif isinstance(step, SavGol):
                out.append({"kind": "savgol", "window": step.window,
                            "polyorder": step.polyorder,
                            "derivorder": step.derivorder})
            elif isinstance(step, CenterX):
                out.append({"kind": "center_x",
                            "means": None if step.means is None
                            else [float(v) for v in step.means]})
            elif isinstance(step, CenterY):
                out.append({"kind": "center_y", "mean": step.mean})
        return out

    @classmethod
    def from_json_obj(cls, obj: list[dict]) -> "PreprocPipeline":
        steps: list[Step] = []
        for rec in obj:
            kind = rec.get("kind")
            if kind == "snv":
                steps.append(Snv())
            elif kind == "savgol":
                steps.append(SavGol(rec["window"], rec["polyorder"], rec["derivorder"]))
            elif kind == "center_x":
                means = rec.get("means")
                steps.append(CenterX(None if means is None else np.asarray(means)))
            elif kind == "center_y":
                steps.append(CenterY(rec.get("mean")))
            else:
                raise DataError(f"unknown pipeline step kind {kind!r}")
        return cls(steps)


def apply_pipeline(pipeline: PreprocPipeline, matrix: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`PreprocPipeline.apply`."""
    return pipeline.apply(matrix)


PIPELINE_CHOICES = ("snv_sg", "center", "none")


def make_pipeline(choice: str) -> PreprocPipeline:
    """Build one of the named pipelines: ``snv_sg`` (SNV then SavGol 7/2/2),
    ``center`` (spectral centering only) or ``none``."""
    if choice == "snv_sg":
        return PreprocPipeline([Snv(), SavGol(7, 2, 2)])
    if choice == "center":
        return PreprocPipeline([CenterX()])
    if choice == "none":
        return PreprocPipeline([])
    raise DataError(f"unknown pipeline choice {choice!r}; options: {PIPELINE_CHOICES}")
