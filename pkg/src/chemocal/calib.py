"""Calibration protocol: bulk-mean reference assignment, bulk-stratified
K-fold ensembles, split-dependent ensemble prediction semantics, bulk-level
aggregation, and the bulk-calibrated variant.

Ensemble outputs follow the cross-validation bookkeeping: a calibration
(train-split) subsample in fold k is scored by the mean of the four
constituents that trained on it, its validation view by constituent k
alone, and test subsamples by the mean of all five constituents.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import Subsample, spectra_matrix
from .errors import DataError
from .pls import (TASK_DISCRIMINANT, TASK_REGRESSION, PlsModel, fit_pls,
                  fit_plsda, model_from_json_obj, model_to_json_obj, predict,
                  select_components)
from .specprep import make_pipeline

PREDICTION_CSV_FIELDS = ["subsample_id", "bulk_id", "split", "fold",
                         "constituent", "yhat"]
BULK_AGG_CSV_FIELDS = ["bulk_id", "split", "y_bm", "yhat_bm", "sem"]
ENSEMBLE_LABEL = "ensemble"
SPLIT_ORDER = ("train", "val", "test")


# ---------------------------------------------------------------------------
# References

@dataclass
class ReferenceTable:
    """bulk_id -> measured bulk reference (protein % or class label)."""

    values: dict[str, float | str]

    def __post_init__(self):
        for bulk, v in self.values.items():
            if isinstance(v, float) and not (np.isfinite(v) and v > 0):
                raise DataError(f"bulk {bulk}: reference must be finite and positive")

    def __getitem__(self, bulk_id: str):
        try:
            return self.values[bulk_id]
        except KeyError:
            raise DataError(f"missing bulk reference for bulk_id={bulk_id}") from None

    def __contains__(self, bulk_id: str) -> bool:
        return bulk_id in self.values


def load_references(path: str | Path) -> ReferenceTable:
    """Read a `bulk_id,value` CSV; numeric values parse as floats."""
    path = Path(path)
    values: dict[str, float | str] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["bulk_id", "value"]:
            raise DataError(f"{path}: expected header bulk_id,value")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) < 2:
                raise DataError(f"{path}:{lineno}: wrong field count")
            bulk, raw = rec[0], rec[1]
            if bulk in values:
                raise DataError(f"{path}:{lineno}: duplicate bulk_id {bulk}")
            try:
                values[bulk] = float(raw)
            except ValueError:
                values[bulk] = raw
    return ReferenceTable(values)


def write_references(table: ReferenceTable, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bulk_id", "value"])
        for bulk in sorted(table.values):
            v = table.values[bulk]
            writer.writerow([bulk, repr(v) if isinstance(v, float) else v])


def assign_bulk_references(subsamples: list[Subsample], table: ReferenceTable) -> np.ndarray:
    """Label every subsample with its bulk's reference value."""
    out = [table[ss.bulk_id] for ss in subsamples]
    if out and isinstance(out[0], float):
        return np.asarray(out, dtype=np.float64)
    return np.asarray(out, dtype=object)


# ---------------------------------------------------------------------------
# Folds

def split_folds(bulk_ids: list[str], n_folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Partition bulks (never subsamples) into near-equal folds,
    deterministically under the seed."""
    bulk_ids = list(bulk_ids)
    if len(set(bulk_ids)) != len(bulk_ids):
        raise DataError("duplicate bulk ids in fold split")
    if len(bulk_ids) < n_folds:
        raise DataError(f"cannot split {len(bulk_ids)} bulks into {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(bulk_ids))
    assignment = {}
    for pos, idx in enumerate(order):
        assignment[bulk_ids[int(idx)]] = pos % n_folds
    return assignment


# ---------------------------------------------------------------------------
# Ensemble model

@dataclass
class ExternalConstituent:
    """Per-subsample predictions supplied from outside (e.g. CNN outputs)."""

    predictions: dict[str, float]

    def lookup(self, subsample_ids: list[str]) -> np.ndarray:
        out = np.empty(len(subsample_ids))
        for i, sid in enumerate(subsample_ids):
            if sid not in self.predictions:
                raise DataError(f"external predictions missing subsample {sid}")
            out[i] = self.predictions[sid]
        return out


@dataclass
class ModelConfig:
    task: str = TASK_REGRESSION
    pipeline: str = "none"
    n_components: int | None = None   # None -> CV-selected per constituent
    grid: list[int] | None = None
    max_components: int = 30          # grid ceiling when grid is None
    selection_folds: int = 5
    seed: int = 0


@dataclass
class EnsembleModel:
    constituents: list
    fold_of_bulk: dict[str, int]
    task: str = TASK_REGRESSION
    level: str = "subsample"          # 'subsample' or 'bulk' calibration
    classes: list | None = None
    training_bulks: list[list[str]] | None = None  # per constituent, audit trail

    def __post_init__(self):
        folds = set(self.fold_of_bulk.values())
        if folds and not folds <= set(range(len(self.constituents))):
            raise DataError("fold assignment references unknown constituents")

    @property
    def n_constituents(self) -> int:
        return len(self.constituents)


def _resolve_folds(subsamples: list[Subsample], n_folds: int, seed: int) -> dict[str, int]:
    """Reuse fold labels already present on the CV subsamples, else assign."""
    cv = [ss for ss in subsamples if ss.split != "test"]
    if not cv:
        raise DataError("no calibration subsamples (all rows are test split)")
    if all(ss.fold is not None for ss in cv):
        fold_of_bulk: dict[str, int] = {}
        for ss in cv:
            if not 0 <= ss.fold < n_folds:
                raise DataError(f"subsample {ss.subsample_id}: fold {ss.fold} out of range")
            prev = fold_of_bulk.setdefault(ss.bulk_id, ss.fold)
            if prev != ss.fold:
                raise DataError(f"bulk {ss.bulk_id} straddles folds {prev} and {ss.fold}")
        if len(set(fold_of_bulk.values())) < n_folds:
            raise DataError("existing fold labels do not cover every fold")
        return fold_of_bulk
    bulks = sorted({ss.bulk_id for ss in cv})
    return split_folds(bulks, n_folds, seed)


def _fit_one(X: np.ndarray, y, config: ModelConfig):
    pipeline = make_pipeline(config.pipeline)
    a = config.n_components
    if a is None:
        a = select_components(X, y, config.selection_folds, config.grid,
                              task=config.task, pipeline=pipeline,
                              seed=config.seed, upper=config.max_components)
    if config.task == TASK_DISCRIMINANT:
        return fit_plsda(X, y, a, pipeline)
    return fit_pls(X, np.asarray(y, dtype=np.float64), a, pipeline)


def _fit_constituents(jobs: list[tuple], config: ModelConfig, threads: int) -> list[PlsModel]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_fit_one, X, y, config) for X, y in jobs]
            return [f.result() for f in futures]
    return [_fit_one(X, y, config) for X, y in jobs]


def fit_ensemble(subsamples: list[Subsample], table: ReferenceTable,
                 n_folds: int = 5, config: ModelConfig = ModelConfig(),
                 threads: int = 1) -> EnsembleModel:
    """Fit the K-constituent ensemble: constituent k trains on every
    calibration bulk outside fold k; test-split rows never train."""
    fold_of_bulk = _resolve_folds(subsamples, n_folds, config.seed)
    refs = assign_bulk_references(subsamples, table)
    cv_idx = [i for i, ss in enumerate(subsamples) if ss.split != "test"]
    for i in cv_idx:
        if subsamples[i].bulk_id not in fold_of_bulk:
            raise DataError(f"bulk {subsamples[i].bulk_id} has no fold assignment")
    X_all = spectra_matrix(subsamples)

    jobs = []
    training_bulks = []
    for k in range(n_folds):
        train_idx = [i for i in cv_idx if fold_of_bulk[subsamples[i].bulk_id] != k]
        if not train_idx:
            raise DataError(f"constituent {k}: empty training set")
        jobs.append((X_all[train_idx], refs[train_idx] if config.task == TASK_REGRESSION
                     else [refs[i] for i in train_idx]))
        training_bulks.append(sorted({subsamples[i].bulk_id for i in train_idx}))
    constituents = _fit_constituents(jobs, config, threads)

    classes = constituents[0].classes if config.task == TASK_DISCRIMINANT else None
    if classes is not None:
        for c in constituents[1:]:
            if c.classes != classes:
                raise DataError("constituents disagree on the class set")
    return EnsembleModel(constituents, fold_of_bulk, config.task, "subsample",
                         classes, training_bulks)


def bulk_mean_spectra(subsamples: list[Subsample]) -> tuple[list[str], np.ndarray, dict[str, str]]:
    """Grain-pixel-weighted mean spectrum per bulk (weights are densities,
    which are proportional to grain pixel counts for equal crop windows).

    Returns sorted bulk ids, the (n_bulks, bands) matrix, and each bulk's
    storage split.
    """
    groups: dict[str, list[Subsample]] = {}
    for ss in subsamples:
        groups.setdefault(ss.bulk_id, []).append(ss)
    bulk_ids = sorted(groups)
    spectra = []
    splits = {}
    for bulk in bulk_ids:
        rows = groups[bulk]
        weights = np.array([ss.density for ss in rows])
        if weights.sum() <= 0:
            raise DataError(f"bulk {bulk}: zero total grain weight")
        stacked = np.vstack([ss.mean_spectrum for ss in rows])
        spectra.append(weights @ stacked / weights.sum())
        bulk_splits = {ss.split for ss in rows}
        if len(bulk_splits) != 1:
            raise DataError(f"bulk {bulk} spans multiple storage splits")
        splits[bulk] = bulk_splits.pop()
    return bulk_ids, np.vstack(spectra), splits


def fit_bulk_model(subsamples: list[Subsample], table: ReferenceTable,
                   n_folds: int = 5, config: ModelConfig = ModelConfig(),
                   threads: int = 1) -> EnsembleModel:
    """Bulk-calibrated variant: constituents fit on the calibration bulks'
    mean spectra (one row per bulk) under the same fold assignment."""
    if config.task != TASK_REGRESSION:
        raise DataError("bulk-level calibration is regression-only")
    fold_of_bulk = _resolve_folds(subsamples, n_folds, config.seed)
    bulk_ids, spectra, splits = bulk_mean_spectra(subsamples)
    cv_bulks = [b for b in bulk_ids if splits[b] != "test"]
    y = np.array([table[b] for b in cv_bulks], dtype=np.float64)
    X = spectra[[bulk_ids.index(b) for b in cv_bulks]]

    jobs = []
    training_bulks = []
    for k in range(n_folds):
        rows = [i for i, b in enumerate(cv_bulks) if fold_of_bulk[b] != k]
        if not rows:
            raise DataError(f"constituent {k}: empty training set")
        jobs.append((X[rows], y[rows]))
        training_bulks.append([cv_bulks[i] for i in rows])
    constituents = _fit_constituents(jobs, config, threads)
    return EnsembleModel(constituents, fold_of_bulk, config.task, "bulk",
                         None, training_bulks)


# ---------------------------------------------------------------------------
# Prediction sets

@dataclass
class PredictionSet:
    """Long-format predictions: one row per (subsample, view split,
    constituent), where constituent is an index or ``ensemble``."""

    subsample_id: list[str] = field(default_factory=list)
    bulk_id: list[str] = field(default_factory=list)
    split: list[str] = field(default_factory=list)
    fold: list[int | None] = field(default_factory=list)
    constituent: list[str] = field(default_factory=list)
    yhat: list = field(default_factory=list)

    def append(self, sid, bulk, split, fold, constituent, yhat) -> None:
        self.subsample_id.append(sid)
        self.bulk_id.append(bulk)
        self.split.append(split)
        self.fold.append(fold)
        self.constituent.append(constituent)
        self.yhat.append(yhat)

    def __len__(self) -> int:
        return len(self.subsample_id)

    def ensemble_rows(self, split: str | None = None):
        """Indices of ensemble rows, optionally restricted to one split."""
        return [i for i in range(len(self))
                if self.constituent[i] == ENSEMBLE_LABEL
                and (split is None or self.split[i] == split)]

    def constituent_rows(self, split: str | None = None):
        return [i for i in range(len(self))
                if self.constituent[i] != ENSEMBLE_LABEL
                and (split is None or self.split[i] == split)]

    def splits_present(self) -> set[str]:
        return set(self.split)


def _constituent_values(ensemble: EnsembleModel, subsamples: list[Subsample],
                        X: np.ndarray) -> list[np.ndarray]:
    """Raw per-constituent outputs for every subsample row: (n,) for
    regression, (n, n_classes) score matrices for discriminant models."""
    ids = [ss.subsample_id for ss in subsamples]
    values = []
    for constituent in ensemble.constituents:
        if isinstance(constituent, ExternalConstituent):
            values.append(constituent.lookup(ids))
        elif ensemble.task == TASK_DISCRIMINANT:
            values.append(np.atleast_2d(predict(constituent, X)))
        else:
            values.append(np.atleast_2d(predict(constituent, X))[:, 0])
    return values


def _views_for(ss: Subsample, fold_of_bulk: dict[str, int], n_constituents: int):
    """(view_split, contributing constituent indices) pairs for a subsample."""
    if ss.split == "test":
        return [("test", list(range(n_constituents)))]
    fold = fold_of_bulk.get(ss.bulk_id, ss.fold)
    if fold is None:
        raise DataError(f"subsample {ss.subsample_id}: fold unknown for {ss.split} row")
    if ss.split == "val":
        return [("val", [fold])]
    return [("train", [c for c in range(n_constituents) if c != fold]),
            ("val", [fold])]


def assemble_prediction_set(subsamples: list[Subsample], values: list,
                            fold_of_bulk: dict[str, int],
                            task: str = TASK_REGRESSION,
                            classes: list | None = None) -> PredictionSet:
    """Turn raw per-constituent outputs into view rows.

    ``values`` holds one array per constituent: shape (n,) for regression
    or (n, n_classes) score matrices for discriminant models, aligned with
    ``subsamples``.
    """
    out = PredictionSet()
    nc = len(values)
    for i, ss in enumerate(subsamples):
        fold = fold_of_bulk.get(ss.bulk_id, ss.fold)
        for view, members in _views_for(ss, fold_of_bulk, nc):
            row_fold = None if ss.split == "test" else fold
            if task == TASK_DISCRIMINANT:
                scores = [values[c][i] for c in members]
                for c, sc in zip(members, scores):
                    label = classes[int(np.argmax(sc))]
                    out.append(ss.subsample_id, ss.bulk_id, view, row_fold, str(c), label)
                mean_label = classes[int(np.argmax(np.mean(scores, axis=0)))]
                out.append(ss.subsample_id, ss.bulk_id, view, row_fold,
                           ENSEMBLE_LABEL, mean_label)
            else:
                vals = [float(values[c][i]) for c in members]
                for c, v in zip(members, vals):
                    out.append(ss.subsample_id, ss.bulk_id, view, row_fold, str(c), v)
                out.append(ss.subsample_id, ss.bulk_id, view, row_fold,
                           ENSEMBLE_LABEL, float(np.mean(vals)))
    return out


def predict_set(ensemble: EnsembleModel, subsamples: list[Subsample]) -> PredictionSet:
    """Predict every subsample under the split-dependent ensemble rules.

    Calibration rows yield both their train view (mean over the four
    constituents that trained on them) and their validation view (their
    own fold's constituent); test rows average all constituents.
    """
    X = spectra_matrix(subsamples)
    values = _constituent_values(ensemble, subsamples, X)
    return assemble_prediction_set(subsamples, values, ensemble.fold_of_bulk,
                                   ensemble.task, ensemble.classes)


def ensemble_predict(ensemble: EnsembleModel, subsample: Subsample):
    """Ensemble prediction for a single subsample under its split's rule."""
    pset = predict_set(ensemble, [subsample])
    rows = pset.ensemble_rows(split=subsample.split)
    return pset.yhat[rows[0]]


# ---------------------------------------------------------------------------
# Bulk aggregation

@dataclass
class BulkAggregate:
    bulk_id: str
    split: str
    y_ref: float
    yhat_mean: float
    sem: float | None
    n_subsamples: int
    n_constituents: int


def aggregate_bulk_means(pred_set: PredictionSet, table: ReferenceTable) -> list[BulkAggregate]:
    """Per (bulk, split): mean ensemble prediction over the bulk's
    subsamples, and the SEM of the per-constituent bulk means (sample std
    over constituents divided by sqrt(#constituents); omitted when only
    one constituent contributes)."""
    ens: dict[tuple[str, str], list[float]] = {}
    per_const: dict[tuple[str, str], dict[str, list[float]]] = {}
    for i in range(len(pred_set)):
        key = (pred_set.split[i], pred_set.bulk_id[i])
        v = pred_set.yhat[i]
        if not isinstance(v, float):
            raise DataError("bulk aggregation requires regression predictions")
        if pred_set.constituent[i] == ENSEMBLE_LABEL:
            ens.setdefault(key, []).append(v)
        else:
            per_const.setdefault(key, {}).setdefault(pred_set.constituent[i], []).append(v)

    out = []
    for split in SPLIT_ORDER:
        bulks = sorted({b for s, b in ens if s == split})
        for bulk in bulks:
            vals = ens[(split, bulk)]
            const_means = [float(np.mean(v))
                           for _, v in sorted(per_const.get((split, bulk), {}).items())]
            k = len(const_means)
            sem = float(np.std(const_means, ddof=1) / np.sqrt(k)) if k >= 2 else None
            ref = table[bulk]
            if not isinstance(ref, float):
                raise DataError(f"bulk {bulk}: non-numeric reference in regression aggregation")
            out.append(BulkAggregate(bulk, split, ref, float(np.mean(vals)),
                                     sem, len(vals), k))
    return out


# ---------------------------------------------------------------------------
# Bulk-level prediction sets (for the bulk-calibrated analysis)

def bulk_level_prediction_set(ensemble: EnsembleModel,
                              subsamples: list[Subsample]) -> PredictionSet:
    """Predict each bulk's weighted mean spectrum instead of its
    subsamples, yielding one pseudo-row per bulk and view."""
    bulk_ids, spectra, splits = bulk_mean_spectra(subsamples)
    pseudo = []
    for j, bulk in enumerate(bulk_ids):
        split = splits[bulk]
        fold = ensemble.fold_of_bulk.get(bulk)
        pseudo.append(Subsample(
            subsample_id=bulk, bulk_id=bulk, split=split, fold=fold,
            density=1.0, mean_spectrum=spectra[j]))
    return predict_set(ensemble, pseudo)


# ---------------------------------------------------------------------------
# CSV / JSON persistence

def write_prediction_csv(pred_set: PredictionSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_CSV_FIELDS)
        for i in range(len(pred_set)):
            v = pred_set.yhat[i]
            writer.writerow([
                pred_set.subsample_id[i], pred_set.bulk_id[i], pred_set.split[i],
                "" if pred_set.fold[i] is None else pred_set.fold[i],
                pred_set.constituent[i],
                repr(v) if isinstance(v, float) else v,
            ])


def read_prediction_csv(path: str | Path) -> PredictionSet:
    path = Path(path)
    out = PredictionSet()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_CSV_FIELDS:
            raise DataError(f"{path}: unexpected prediction CSV header")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(PREDICTION_CSV_FIELDS):
                raise DataError(f"{path}:{lineno}: wrong field count")
            sid, bulk, split, fold, constituent, raw = rec
            try:
                value: float | str = float(raw)
            except ValueError:
                value = raw
            out.append(sid, bulk, split, None if fold == "" else int(fold),
                       constituent, value)
    return out


def write_bulk_aggregate_csv(rows: list[BulkAggregate], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BULK_AGG_CSV_FIELDS)
        for r in rows:
            writer.writerow([r.bulk_id, r.split, repr(r.y_ref), repr(r.yhat_mean),
                             "" if r.sem is None else repr(r.sem)])


def load_external_predictions(path: str | Path,
                              n_constituents: int = 5) -> list[ExternalConstituent]:
    """Build constituents from a per-constituent prediction CSV (same
    schema as the prediction set, constituent column holding indices)."""
    pset = read_prediction_csv(path)
    tables: dict[int, dict[str, float]] = {k: {} for k in range(n_constituents)}
    for i in range(len(pset)):
        label = pset.constituent[i]
        if label == ENSEMBLE_LABEL:
            continue
        k = int(label)
        if k not in tables:
            raise DataError(f"constituent index {k} out of range")
        v = pset.yhat[i]
        if not isinstance(v, float):
            raise DataError("external predictions must be numeric")
        tables[k][pset.subsample_id[i]] = v
    return [ExternalConstituent(tables[k]) for k in range(n_constituents)]


def ensemble_to_json_obj(ensemble: EnsembleModel) -> dict:
    for constituent in ensemble.constituents:
        if isinstance(constituent, ExternalConstituent):
            raise DataError("external-prediction ensembles are CSV-backed, not serializable")
    return {
        "kind": "ensemble",
        "task": ensemble.task,
        "level": ensemble.level,
        "classes": ensemble.classes,
        "fold_of_bulk": dict(sorted(ensemble.fold_of_bulk.items())),
        "constituents": [model_to_json_obj(c) for c in ensemble.constituents],
    }


def ensemble_from_json_obj(obj: dict) -> EnsembleModel:
    if obj.get("kind") != "ensemble":
        raise DataError("not an ensemble record")
    return EnsembleModel(
        constituents=[model_from_json_obj(c) for c in obj["constituents"]],
        fold_of_bulk={k: int(v) for k, v in obj["fold_of_bulk"].items()},
        task=obj.get("task", TASK_REGRESSION),
        level=obj.get("level", "subsample"),
        classes=obj.get("classes"),
    )


def save_ensemble(ensemble: EnsembleModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_json_obj(ensemble)) + "\n")


def load_ensemble(path: str | Path) -> EnsembleModel:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed ensemble file {path}: {exc}") from exc
    return ensemble_from_json_obj(obj)
