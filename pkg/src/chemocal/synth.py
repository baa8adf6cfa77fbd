"""Seeded synthetic-data oracle: bulks with known mean references,
subsamples whose true protein deviates from the bulk mean by a centered
kernel-level term scaled with 1/sqrt(grain density), and spectra linearly
tied to the true protein.

The generator can induce or suppress skewed/leptokurtic subsample
deviations on demand, and `induce_attenuation` manufactures a
shrink-toward-the-mean predictor whose bulk-mean regression must show a
scale above 1 and a negative bias, for exercising the correction and
diagnostic machinery end to end.

Randomness comes from numpy's PCG64, seeded through a SeedSequence that
spawns one child stream per bulk (and per constituent for the attenuated
predictor), so per-bulk generation is order-independent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import (PredictionSet, ReferenceTable, assemble_prediction_set,
                    split_folds, write_references)
from .cube import Subsample, write_subsample_csv
from .errors import DataError

TRUTH_CSV_FIELDS = ["subsample_id", "true_protein"]


# ---------------------------------------------------------------------------
# Kernel-deviation models (all centered: zero mean by construction)

@dataclass(frozen=True)
class NormalDeviation:
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError("sigma must be >= 0")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.normal(0.0, self.sigma, size)


@dataclass(frozen=True)
class SkewNormalDeviation:
    """Skew-normal via the two-normal construction
    delta*|u| + sqrt(1-delta^2)*v, recentered to zero mean."""

    alpha: float = 5.0
    omega: float = 1.0

    def __post_init__(self):
        if self.omega < 0:
            raise DataError("omega must be >= 0")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        delta = self.alpha / math.sqrt(1.0 + self.alpha ** 2)
        u = rng.normal(size=size)
        v = rng.normal(size=size)
        x = self.omega * (delta * np.abs(u) + math.sqrt(1.0 - delta ** 2) * v)
        return x - self.omega * delta * math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ContaminatedDeviation:
    """Normal core plus one-sided shifted outliers at a fixed rate,
    recentered; directly manufactures skewed leptokurtic shapes."""

    sigma: float = 0.5
    outlier_rate: float = 0.05
    outlier_shift: float = 4.0

    def __post_init__(self):
        if self.sigma < 0 or not 0.0 <= self.outlier_rate <= 1.0:
            raise DataError("bad contamination parameters")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        x = rng.normal(0.0, self.sigma, size)
        outliers = rng.random(size) < self.outlier_rate
        return x + outliers * self.outlier_shift - self.outlier_rate * self.outlier_shift


DeviationSpec = NormalDeviation | SkewNormalDeviation | ContaminatedDeviation


def parse_deviation(text: str) -> DeviationSpec:
    """Parse specs like ``normal:1.0``, ``skew_normal:5,0.5`` or
    ``contaminated:0.5,0.05,4.0``."""
    name, _, raw = text.partition(":")
    try:
        args = [float(v) for v in raw.split(",")] if raw else []
        if name == "normal":
            return NormalDeviation(*args)
        if name == "skew_normal":
            return SkewNormalDeviation(*args)
        if name == "contaminated":
            return ContaminatedDeviation(*args)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad deviation spec {text!r}: {exc}") from exc
    raise DataError(f"unknown deviation kind {name!r}")


# ---------------------------------------------------------------------------
# Configuration

def default_signature(bands: int = 102) -> np.ndarray:
    """Smooth two-bump protein loading."""
    x = np.linspace(0.0, 1.0, bands)
    return 0.012 * (np.exp(-((x - 0.35) / 0.08) ** 2)
                    + 0.6 * np.exp(-((x - 0.72) / 0.05) ** 2))


def default_baseline(bands: int = 102) -> np.ndarray:
    x = np.linspace(0.0, 1.0, bands)
    return 0.6 + 0.25 * np.sin(2.5 * np.pi * x + 0.3) + 0.1 * x


@dataclass
class SynthConfig:
    # The default kernel scale 0.72 pairs with the 8-16 protein range so the
    # shrinkage predictor with lam = 0.8 is calibrated at subsample level:
    # var_bulk / (var_bulk + var_deviation) = 0.8 with density ~ U[0.1, 1].
    n_bulks: int = 63
    n_test_bulks: int = 13
    subsamples_per_bulk: int = 1000
    bands: int = 102
    protein_range: tuple[float, float] = (8.0, 16.0)
    deviation: DeviationSpec = NormalDeviation(0.72)
    signature: np.ndarray | None = None
    scatter_gain_sd: float = 0.05
    additive_noise_sd: float = 0.005
    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_bulks <= self.n_test_bulks:
            raise DataError("need more bulks than test bulks")
        if self.n_bulks - self.n_test_bulks < self.n_folds:
            raise DataError("not enough calibration bulks for the fold count")
        if self.subsamples_per_bulk < 1 or self.bands < 2:
            raise DataError("bad synthetic dimensions")
        if self.scatter_gain_sd < 0 or self.additive_noise_sd < 0:
            raise DataError("noise scales must be >= 0")
        lo, hi = self.protein_range
        if not (0 < lo < hi):
            raise DataError("protein range must be positive and increasing")


@dataclass
class SynthData:
    subsamples: list[Subsample]
    table: ReferenceTable
    truth: dict[str, float]
    config: SynthConfig | None = field(repr=False, default=None)

    def cv_reference_mean(self) -> float:
        refs = [self.table[ss_bulk] for ss_bulk in sorted(
            {ss.bulk_id for ss in self.subsamples if ss.split != "test"})]
        return float(np.mean(refs))


def _stratified_uniform(rng: np.random.Generator, lo: float, hi: float,
                        n: int) -> np.ndarray:
    edges = np.linspace(lo, hi, n + 1)
    values = edges[:-1] + rng.random(n) * (edges[1:] - edges[:-1])
    return rng.permutation(values)


def generate(config: SynthConfig) -> SynthData:
    """Build the synthetic bulk/subsample structure.

    Per bulk: a mean reference drawn uniformly over the protein range.
    Per subsample: density ~ U[0.1, 1]; true protein = bulk reference plus
    a centered kernel deviation scaled by 1/sqrt(density); spectrum =
    (baseline + protein * signature) * gain + white noise.  The bulk
    reference table is what calibration sees; exact per-subsample truths
    are returned separately.
    """
    signature = (default_signature(config.bands) if config.signature is None
                 else np.asarray(config.signature, dtype=np.float64))
    if signature.size != config.bands:
        raise DataError("signature length must equal the band count")
    baseline = default_baseline(config.bands)

    root = np.random.SeedSequence(config.seed)
    streams = root.spawn(config.n_bulks + 1)
    global_rng = np.random.default_rng(streams[0])
    lo, hi = config.protein_range
    n_cv = config.n_bulks - config.n_test_bulks
    # stratified draws per group: one uniform draw inside each of n equal
    # slices of the range, shuffled; keeps the CV and test reference spreads
    # comparable at small bulk counts
    bulk_refs = np.concatenate([
        _stratified_uniform(global_rng, lo, hi, n_cv),
        _stratified_uniform(global_rng, lo, hi, config.n_test_bulks),
    ])
    bulk_ids = [f"B{i:03d}" for i in range(config.n_bulks)]
    cv_ids = bulk_ids[:n_cv]
    fold_of_bulk = split_folds(cv_ids, config.n_folds, config.seed)

    subsamples: list[Subsample] = []
    truth: dict[str, float] = {}
    for i, bulk in enumerate(bulk_ids):
        rng = np.random.default_rng(streams[i + 1])
        n_ss = config.subsamples_per_bulk
        densities = rng.uniform(0.1, 1.0, n_ss)
        deviations = config.deviation.sample(rng, n_ss) / np.sqrt(densities)
        gains = 1.0 + rng.normal(0.0, config.scatter_gain_sd, n_ss)
        noise = rng.normal(0.0, config.additive_noise_sd, (n_ss, config.bands))
        protein = bulk_refs[i] + deviations
        spectra = (baseline + np.outer(protein, signature)) * gains[:, None] + noise

        split = "train" if i < n_cv else "test"
        fold = fold_of_bulk.get(bulk)
        for j in range(n_ss):
            sid = f"{bulk}_S{j:05d}"
            subsamples.append(Subsample(
                subsample_id=sid, bulk_id=bulk, split=split, fold=fold,
                density=float(densities[j]), mean_spectrum=spectra[j]))
            truth[sid] = float(protein[j])

    table = ReferenceTable({bulk: float(bulk_refs[i])
                            for i, bulk in enumerate(bulk_ids)})
    return SynthData(subsamples=subsamples, table=table, truth=truth, config=config)


def induce_attenuation(data: SynthData, lam: float,
                       noise: DeviationSpec | None = None, seed: int = 0,
                       n_constituents: int = 5) -> PredictionSet:
    """Oracle predictor that shrinks the true protein toward the
    calibration-set mean reference: yhat = mu + lam*(truth - mu) + noise.

    With zero noise the bulk-mean regression of references on predictions
    recovers scale = 1/lam and bias = mu*(1 - 1/lam) exactly.  Each
    constituent receives an independent noise stream; the rows follow the
    usual split-view semantics.
    """
    if not 0.0 < lam <= 1.0:
        raise DataError("attenuation factor must lie in (0, 1]")
    mu = data.cv_reference_mean()
    n = len(data.subsamples)
    truths = np.array([data.truth[ss.subsample_id] for ss in data.subsamples])
    base = mu + lam * (truths - mu)

    streams = np.random.SeedSequence(seed).spawn(n_constituents)
    values = []
    for k in range(n_constituents):
        if noise is None:
            values.append(base.copy())
        else:
            rng = np.random.default_rng(streams[k])
            values.append(base + noise.sample(rng, n))

    fold_of_bulk = {ss.bulk_id: ss.fold for ss in data.subsamples
                    if ss.split != "test" and ss.fold is not None}
    return assemble_prediction_set(data.subsamples, values, fold_of_bulk)


# ---------------------------------------------------------------------------
# Fixtures

FIXTURE_SIZES = {
    "tiny": dict(n_bulks=6, n_test_bulks=1, subsamples_per_bulk=40),
    "desk": dict(n_bulks=63, n_test_bulks=13, subsamples_per_bulk=1000),
}


def write_truth_csv(truth: dict[str, float], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_CSV_FIELDS)
        for sid in truth:  # generation order
            writer.writerow([sid, repr(truth[sid])])


def read_truth_csv(path: str | Path) -> dict[str, float]:
    path = Path(path)
    out: dict[str, float] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRUTH_CSV_FIELDS:
            raise DataError(f"{path}: unexpected truth CSV header")
        for rec in reader:
            out[rec[0]] = float(rec[1])
    return out


def export_fixture(size: str, out_dir: str | Path, seed: int,
                   config: SynthConfig | None = None) -> dict[str, Path]:
    """Write subsamples.csv, references.csv and truth.csv for a named
    fixture size (or an explicit config)."""
    if config is None:
        if size not in FIXTURE_SIZES:
            raise DataError(f"unknown fixture size {size!r}; options: "
                            f"{sorted(FIXTURE_SIZES)}")
        config = SynthConfig(seed=seed, **FIXTURE_SIZES[size])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate(config)
    paths = {
        "subsamples": out_dir / "subsamples.csv",
        "references": out_dir / "references.csv",
        "truth": out_dir / "truth.csv",
    }
    write_subsample_csv(data.subsamples, paths["subsamples"])
    write_references(data.table, paths["references"])
    write_truth_csv(data.truth, paths["truth"])
    return paths
