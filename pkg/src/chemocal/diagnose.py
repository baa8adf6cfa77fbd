"""Per-bulk prediction-distribution diagnostics: sample skewness and excess
kurtosis, their normal-approximation Z-tests, and the combined omnibus
test (sum of squared Z-scores, chi-squared with 2 degrees of freedom
under normality).

Moments use the divisor-n convention the classical test derivations
assume.  The skewness transformation follows D'Agostino (1970); the
kurtosis transformation follows Anscombe & Glynn (1983).  Both are
calibrated here by Monte-Carlo nulls rather than against any particular
software.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import PredictionSet, ReferenceTable
from .errors import DataError

MIN_N_SKEW = 8
MIN_N_KURT = 5
WARN_N_KURT = 20

DISTRIBUTION_CSV_FIELDS = ["bulk_id", "split", "n", "y_bm", "g1", "z_skew",
                           "p_skew", "g2", "z_kurt", "p_kurt", "k2", "p_omnibus"]


@dataclass
class Moments:
    mean: float
    m2: float
    m3: float
    m4: float
    g1: float
    g2: float


def sample_moments(x: np.ndarray) -> Moments:
    """Central moments (divisor n), skewness g1 = m3/m2^1.5 and excess
    kurtosis g2 = m4/m2^2 - 3."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 2:
        raise DataError("moments need at least 2 observations")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d ** 2))
    if m2 == 0.0:
        raise DataError("zero variance: higher moments undefined")
    m3 = float(np.mean(d ** 3))
    m4 = float(np.mean(d ** 4))
    return Moments(mean=mean, m2=m2, m3=m3, m4=m4,
                   g1=m3 / m2 ** 1.5, g2=m4 / m2 ** 2 - 3.0)


def _two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def skew_test(x: np.ndarray) -> tuple[float, float]:
    """Two-sided Z-test that the sample skewness is consistent with a
    normal population.

    The skewness is standardized by its null variance and mapped to an
    approximately standard normal deviate through the log/asinh
    variance-stabilizing transformation of D'Agostino (1970).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < MIN_N_SKEW:
        raise DataError(f"skew test needs n >= {MIN_N_SKEW}, got {n}")
    g1 = sample_moments(x).g1
    y = g1 * math.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = (3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
             / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0)))
    w2 = -1.0 + math.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1.0))
    z = delta * math.asinh(y / alpha)
    return z, _two_sided_p(z)


def kurtosis_test(x: np.ndarray) -> tuple[float, float]:
    """Two-sided Z-test that the sample kurtosis is consistent with a
    normal population.

    b2 = m4/m2^2 is standardized by its null mean 3(n-1)/(n+1) and
    variance 24n(n-2)(n-3)/((n+1)^2(n+3)(n+5)), then mapped through the
    Wilson-Hilferty-style cube-root transformation of Anscombe & Glynn
    (1983).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < MIN_N_KURT:
        raise DataError(f"kurtosis test needs n >= {MIN_N_KURT}, got {n}")
    if n < WARN_N_KURT:
        warnings.warn(f"kurtosis test is only approximate for n < {WARN_N_KURT} (n={n})",
                      stacklevel=2)
    moments = sample_moments(x)
    b2 = moments.g2 + 3.0
    mean_b2 = 3.0 * (n - 1.0) / (n + 1.0)
    var_b2 = (24.0 * n * (n - 2.0) * (n - 3.0)
              / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0)))
    xs = (b2 - mean_b2) / math.sqrt(var_b2)
    sqrt_beta1 = (6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
                  * math.sqrt(6.0 * (n + 3.0) * (n + 5.0)
                              / (n * (n - 2.0) * (n - 3.0))))
    a = 6.0 + (8.0 / sqrt_beta1) * (2.0 / sqrt_beta1
                                    + math.sqrt(1.0 + 4.0 / sqrt_beta1 ** 2))
    denom = 1.0 + xs * math.sqrt(2.0 / (a - 4.0))
    if denom == 0.0:
        raise DataError("kurtosis test degenerate: zero transformation denominator")
    ratio = (1.0 - 2.0 / a) / abs(denom)
    term = math.copysign(ratio ** (1.0 / 3.0), denom)
    z = ((1.0 - 2.0 / (9.0 * a)) - term) / math.sqrt(2.0 / (9.0 * a))
    return z, _two_sided_p(z)


def omnibus_test(x: np.ndarray) -> tuple[float, float]:
    """Combined normality test: K2 = Z_skew^2 + Z_kurt^2, with the exact
    chi-squared (2 dof) survival probability exp(-K2/2)."""
    z_skew, _ = skew_test(x)
    z_kurt, _ = kurtosis_test(x)
    k2 = z_skew ** 2 + z_kurt ** 2
    return k2, math.exp(-k2 / 2.0)


# ---------------------------------------------------------------------------
# Per-bulk report

@dataclass
class BulkDistribution:
    """Distribution statistics of one bulk's ensemble subsample predictions.

    ``flag`` marks groups that were too small or degenerate to test; their
    test fields are None.
    """

    bulk_id: str
    split: str
    n: int
    y_ref: float
    g1: float | None = None
    z_skew: float | None = None
    p_skew: float | None = None
    g2: float | None = None
    z_kurt: float | None = None
    p_kurt: float | None = None
    k2: float | None = None
    p_omnibus: float | None = None
    flag: str | None = None


def per_bulk_report(pred_set: PredictionSet, table: ReferenceTable,
                    split: str) -> list[BulkDistribution]:
    """Group ensemble predictions by bulk within one split and run all
    three tests per group; undersized or degenerate groups are flagged,
    not fatal."""
    groups: dict[str, list[float]] = {}
    for i in pred_set.ensemble_rows(split=split):
        v = pred_set.yhat[i]
        if not isinstance(v, float):
            raise DataError("distribution diagnostics require regression predictions")
        groups.setdefault(pred_set.bulk_id[i], []).append(v)
    if not groups:
        raise DataError(f"no ensemble predictions in split {split!r}")

    out = []
    for bulk in sorted(groups):
        values = np.asarray(groups[bulk])
        ref = table[bulk]
        row = BulkDistribution(bulk_id=bulk, split=split, n=values.size,
                               y_ref=float(ref))
        if values.size < MIN_N_SKEW:
            row.flag = "undersized"
            out.append(row)
            continue
        if float(np.var(values)) == 0.0:
            row.flag = "degenerate"
            out.append(row)
            continue
        moments = sample_moments(values)
        row.g1, row.g2 = moments.g1, moments.g2
        row.z_skew, row.p_skew = skew_test(values)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            row.z_kurt, row.p_kurt = kurtosis_test(values)
        row.k2 = row.z_skew ** 2 + row.z_kurt ** 2
        row.p_omnibus = math.exp(-row.k2 / 2.0)
        out.append(row)
    return out


def write_distribution_csv(rows: list[BulkDistribution], path: str | Path) -> None:
    def fmt(v):
        return "" if v is None else repr(v)

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DISTRIBUTION_CSV_FIELDS)
        for r in rows:
            writer.writerow([r.bulk_id, r.split, r.n, repr(r.y_ref),
                             fmt(r.g1), fmt(r.z_skew), fmt(r.p_skew),
                             fmt(r.g2), fmt(r.z_kurt), fmt(r.p_kurt),
                             fmt(r.k2), fmt(r.p_omnibus)])
