"""Latent-variable least-squares models: PLS1/PLS2 regression via NIPALS
and discriminant-analysis wrappers on one-hot indicators.

The NIPALS outer loop extracts one weight vector per component and
deflates X (and Y for multi-response models).  Weight vectors are
sign-fixed so the largest-magnitude entry is positive, which makes fits
bitwise deterministic.  Regression coefficients are assembled as
B = W (P'W)^-1 Q' so that prediction is a single matrix product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .specprep import PreprocPipeline

NIPALS_TOL = 1e-10
NIPALS_MAX_ITER = 500

TASK_REGRESSION = "regression"
TASK_DISCRIMINANT = "discriminant"


@dataclass
class PlsModel:
    n_components: int
    x_weights: np.ndarray       # (bands, A)
    x_loadings: np.ndarray      # (bands, A)
    y_loadings: np.ndarray      # (m, A)
    coefficients: np.ndarray    # (bands, m)
    x_mean: np.ndarray          # (bands,)
    y_mean: np.ndarray          # (m,)
    pipeline: PreprocPipeline
    task: str = TASK_REGRESSION
    classes: list | None = None
    x_scores: np.ndarray | None = field(default=None, repr=False)  # training scores

    @property
    def n_bands(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_responses(self) -> int:
        return self.coefficients.shape[1]


def _as_2d(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    return Y.reshape(-1, 1) if Y.ndim == 1 else Y


def fit_pls(X: np.ndarray, Y: np.ndarray, n_components: int,
            pipeline: PreprocPipeline | None = None,
            tol: float = NIPALS_TOL, max_iter: int = NIPALS_MAX_ITER,
            task: str = TASK_REGRESSION, classes: list | None = None) -> PlsModel:
    """Fit a PLS model with A = n_components latent variables.

    The preprocessing pipeline (copied, then fitted on this training set)
    runs first; X and Y are then centered on their training means.  X is
    deflated every component; Y is deflated only for multi-response fits.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = _as_2d(Y)
    if X.ndim != 2:
        raise DataError("X must be 2-D (samples x bands)")
    n = X.shape[0]
    if n < 2:
        raise DataError("PLS needs at least 2 training samples")
    if Y.shape[0] != n:
        raise DataError("X and Y row counts differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("PLS inputs must be finite")

    pipeline = (pipeline or PreprocPipeline()).copy()
    refs = Y[:, 0] if Y.shape[1] == 1 else None
    pipeline.fit(X, refs)
    Xp = np.atleast_2d(pipeline.apply(X))
    b = Xp.shape[1]
    m = Y.shape[1]
    if not 1 <= n_components <= min(n - 1, b):
        raise DataError(
            f"n_components must lie in [1, min(n-1, bands)] = [1, {min(n - 1, b)}]")

    x_mean = Xp.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xk = Xp - x_mean
    Yk = Y - y_mean

    x_scale = float(np.linalg.norm(Xk))
    if x_scale == 0.0:
        raise DataError("degenerate X: zero variance after centering")
    # components whose score norm falls below this are numerically exhausted
    rank_tol = (1e-12 * x_scale) ** 2

    W = np.zeros((b, n_components))
    P = np.zeros((b, n_components))
    Q = np.zeros((m, n_components))
    T = np.zeros((n, n_components))

    achieved = 0
    for a in range(n_components):
        y_ss = (Yk * Yk).sum(axis=0)
        if float(y_ss.max()) <= rank_tol:
            break  # response residual exhausted
        u = Yk[:, int(np.argmax(y_ss))].copy()
        w = np.zeros(b)
        for _ in range(max_iter):
            w_old = w
            uu = float(u @ u)
            if uu == 0.0:
                raise DataError("NIPALS stalled on a zero score vector")
            w = Xk.T @ u / uu
            w_norm = float(np.linalg.norm(w))
            if w_norm ** 2 <= rank_tol:
                w = None
                break
            w = w / w_norm
            t = Xk @ w
            tt = float(t @ t)
            if tt <= rank_tol:
                w = None
                break
            q = Yk.T @ t / tt
            if m == 1:
                break
            u = Yk @ q / float(q @ q)
            if float(np.linalg.norm(w - w_old)) < tol:
                break
        else:
            raise DataError(f"NIPALS did not converge within {max_iter} iterations")
        if w is None:
            break  # X residual exhausted; keep the components found so far
        # sign convention: largest-magnitude weight entry positive
        if w[int(np.argmax(np.abs(w)))] < 0:
            w = -w
        t = Xk @ w
        tt = float(t @ t)
        if tt <= rank_tol:
            break
        p = Xk.T @ t / tt
        q = Yk.T @ t / tt
        Xk = Xk - np.outer(t, p)
        if m > 1:
            Yk = Yk - np.outer(t, q)
        W[:, a] = w
        P[:, a] = p
        Q[:, a] = q
        T[:, a] = t
        achieved = a + 1

    if achieved == 0:
        raise DataError("degenerate input: no latent component could be "
                        "extracted (X or Y has no usable variance)")
    W, P, Q, T = W[:, :achieved], P[:, :achieved], Q[:, :achieved], T[:, :achieved]
    B = W @ np.linalg.solve(P.T @ W, Q.T)

    return PlsModel(
        n_components=achieved,
        x_weights=W,
        x_loadings=P,
        y_loadings=Q,
        coefficients=B,
        x_mean=x_mean,
        y_mean=y_mean,
        pipeline=pipeline,
        task=task,
        classes=classes,
        x_scores=T,
    )


def predict(model: PlsModel, X: np.ndarray) -> np.ndarray:
    """Predict responses: pipeline, centering, then (X - x_mean) B + y_mean."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Xp = np.atleast_2d(model.pipeline.apply(X))
    if Xp.shape[1] != model.n_bands:
        raise DataError(
            f"band count mismatch: model has {model.n_bands}, data {Xp.shape[1]}")
    out = (Xp - model.x_mean) @ model.coefficients + model.y_mean
    return out[0] if single else out


def fit_plsda(X: np.ndarray, labels, n_components: int,
              pipeline: PreprocPipeline | None = None) -> PlsModel:
    """Discriminant PLS: one-hot encode the labels and fit a PLS2 model."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DataError("PLS-DA needs at least 2 classes")
    index = {c: j for j, c in enumerate(classes)}
    Y = np.zeros((labels.shape[0], len(classes)))
    for i, lab in enumerate(labels.tolist()):
        Y[i, index[lab]] = 1.0
    return fit_pls(X, Y, n_components, pipeline,
                   task=TASK_DISCRIMINANT, classes=classes)


def classify(model: PlsModel, X: np.ndarray) -> np.ndarray:
    """Argmax over predicted class-indicator columns; ties pick the lowest
    class index."""
    if model.task != TASK_DISCRIMINANT:
        raise DataError("classify requires a discriminant model")
    scores = np.atleast_2d(predict(model, X))
    idx = np.argmax(scores, axis=1)
    return np.asarray(model.classes, dtype=object)[idx]


def default_component_grid(n: int, bands: int, upper: int = 30) -> list[int]:
    """1..upper capped at min(n-1, bands)."""
    cap = min(upper, n - 1, bands)
    if cap < 1:
        raise DataError("not enough samples for any component")
    return list(range(1, cap + 1))


def select_components(X: np.ndarray, Y: np.ndarray, n_folds: int,
                      grid: list[int] | None = None,
                      task: str = TASK_REGRESSION,
                      pipeline: PreprocPipeline | None = None,
                      seed: int = 0, upper: int = 30) -> int:
    """Pick the component count by K-fold cross-validation.

    Regression minimizes mean validation RMSE, discriminant maximizes mean
    validation accuracy; near-ties resolve to the smallest A.  The default
    grid is 1..upper capped at what the smallest inner training fold
    supports.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(Y) if task == TASK_DISCRIMINANT else None
    Ymat = None if task == TASK_DISCRIMINANT else _as_2d(Y)
    n = X.shape[0]
    if n_folds < 2 or n_folds > n:
        raise DataError("fold count must lie in [2, n]")
    min_train = n - (n + n_folds - 1) // n_folds
    cap = min(min_train - 1, X.shape[1])
    if cap < 1:
        raise DataError("inner folds leave no room for any component")
    if grid is None:
        grid = list(range(1, min(upper, cap) + 1))
    if not grid:
        raise DataError("empty component grid")
    for a in grid:
        if not 1 <= a <= cap:
            raise DataError(f"grid value {a} invalid for this data (cap {cap})")

    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, n_folds)
    scores = []
    for a in grid:
        fold_scores = []
        for k in range(n_folds):
            val_idx = folds[k]
            train_idx = np.concatenate([folds[j] for j in range(n_folds) if j != k])
            if task == TASK_DISCRIMINANT:
                model = fit_plsda(X[train_idx], labels[train_idx], a, pipeline)
                pred = classify(model, X[val_idx])
                fold_scores.append(float(np.mean(pred == labels[val_idx])))
            else:
                model = fit_pls(X[train_idx], Ymat[train_idx], a, pipeline)
                resid = predict(model, X[val_idx]) - Ymat[val_idx]
                fold_scores.append(float(np.sqrt(np.mean(resid ** 2))))
        scores.append(float(np.mean(fold_scores)))

    scores = np.asarray(scores)
    if task == TASK_DISCRIMINANT:
        best = float(scores.max())
        ok = scores >= best - 1e-12
    else:
        best = float(scores.min())
        ok = scores <= best + 1e-9 * max(1.0, abs(best)) + 1e-12
    candidates = [a for a, good in zip(grid, ok) if good]
    return min(candidates)


# ---------------------------------------------------------------------------
# Persistence

def model_to_json_obj(model: PlsModel) -> dict:
    return {
        "kind": "pls_model",
        "n_components": model.n_components,
        "task": model.task,
        "classes": model.classes,
        "x_weights": model.x_weights.tolist(),
        "x_loadings": model.x_loadings.tolist(),
        "y_loadings": model.y_loadings.tolist(),
        "coefficients": model.coefficients.tolist(),
        "x_mean": model.x_mean.tolist(),
        "y_mean": model.y_mean.tolist(),
        "pipeline": model.pipeline.to_json_obj(),
    }


def model_from_json_obj(obj: dict) -> PlsModel:
    if obj.get("kind") != "pls_model":
        raise DataError("not a PLS model record")
    return PlsModel(
        n_components=int(obj["n_components"]),
        x_weights=np.asarray(obj["x_weights"], dtype=np.float64),
        x_loadings=np.asarray(obj["x_loadings"], dtype=np.float64),
        y_loadings=np.asarray(obj["y_loadings"], dtype=np.float64),
        coefficients=np.asarray(obj["coefficients"], dtype=np.float64),
        x_mean=np.asarray(obj["x_mean"], dtype=np.float64),
        y_mean=np.asarray(obj["y_mean"], dtype=np.float64),
        pipeline=PreprocPipeline.from_json_obj(obj["pipeline"]),
        task=obj.get("task", TASK_REGRESSION),
        classes=obj.get("classes"),
    )


def save_model(model: PlsModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_json_obj(model)) + "\n")


def load_model(path: str | Path) -> PlsModel:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc
    return model_from_json_obj(obj)
