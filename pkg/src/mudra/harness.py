"""Evaluation glue: padding baselines, ridge classifier, metrics, pipelines, timing."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .classify import embed, predict
from .datagen import function_library
from .errors import (
    LengthMismatch,
    NumericalError,
    SingularNormalEquations,
    UnknownTime,
    ValidationError,
)
from .model import FitConfig, fit
from .splines import spline_matrix

PIPELINES = ("bayes", "ridge", "pad-imputation", "pad-end")


@dataclass
class PaddedTable:
    design: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    scheme: str


def _labels(dataset):
    return np.array([0 if s.label is None else s.label for s in dataset], dtype=int)


def pad_imputation(dataset, global_times, feature_count):
    """Align samples on a shared time grid; absent times and features are 0.

    Columns are time-major: column ``k * feature_count + (f - 1)`` holds
    feature ``f`` at ``global_times[k]``.
    """
    global_times = np.asarray(global_times, dtype=float)
    pos = {t: k for k, t in enumerate(global_times.tolist())}
    out = np.zeros((len(dataset), global_times.size * feature_count))
    for n, s in enumerate(dataset):
        for row, t in zip(s.values, s.times.tolist()):
            if t not in pos:
                raise UnknownTime(f"sample {s.id!r}: time {t} not in the global grid")
            out[n, pos[t] * feature_count + s.features - 1] = row
    return PaddedTable(out, _labels(dataset), "imputation")


def pad_end(dataset, feature_count, max_T):
    """Concatenate measured time points in order and zero-fill up to ``max_T``."""
    out = np.zeros((len(dataset), max_T * feature_count))
    for n, s in enumerate(dataset):
        if s.n_times > max_T:
            raise ValidationError(f"sample {s.id!r} has {s.n_times} > max_T={max_T} time points")
        block = np.zeros((max_T, feature_count))
        block[: s.n_times, s.features - 1] = s.values
        out[n] = block.ravel()
    return PaddedTable(out, _labels(dataset), "end")


def ridge_fit(design, labels, lam=1.0, num_classes=None):
    """Weights ``W`` solving ``(X^T X + lam I) W = X^T Y_onehot``."""
    x = np.asarray(design, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[0] != labels.size:
        raise LengthMismatch(f"design {x.shape} and labels {labels.shape} disagree")
    if lam < 0:
        raise ValidationError("ridge lambda must be >= 0")
    k = num_classes or int(labels.max())
    onehot = np.zeros((labels.size, k))
    onehot[np.arange(labels.size), labels - 1] = 1.0
    gram = x.T @ x + lam * np.eye(x.shape[1])
    if lam == 0 and np.linalg.cond(gram) > 1 / np.finfo(float).eps:
        raise SingularNormalEquations("X^T X is singular; use lam > 0")
    return np.linalg.solve(gram, x.T @ onehot)


def ridge_predict(design, weights):
    return np.argmax(np.asarray(design) @ weights, axis=1) + 1


def confusion_matrix(predicted, truth, num_classes):
    conf = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(conf, (np.asarray(truth) - 1, np.asarray(predicted) - 1), 1)
    return conf


def per_class_f1(predicted, truth, num_classes=None):
    predicted = np.asarray(predicted, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predicted.shape != truth.shape:
        raise LengthMismatch(f"{predicted.size} predictions for {truth.size} labels")
    k = num_classes or int(max(predicted.max(initial=0), truth.max(initial=0)))
    conf = confusion_matrix(predicted, truth, k)
    tp = np.diag(conf).astype(float)
    denom = conf.sum(axis=0) + conf.sum(axis=1)
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); classes never predicted nor present score 0
    return np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)


def macro_f1(predicted, truth, num_classes=None):
    """Unweighted mean of per-class F1 scores."""
    return float(per_class_f1(predicted, truth, num_classes).mean())


def functional_mse(model, truth, grid=None):
    """Mean squared gap between estimated class curves and ground truth.

    With ``grid`` given, the true curves are re-evaluated there from their
    library function, using the truth grid's span for normalization.
    """
    params = getattr(model, "params", model)
    means = params.class_means()
    errs = []
    for g in truth:
        if grid is None:
            t, target = g.grid, g.values
        else:
            t = np.asarray(grid, dtype=float)
            lo, hi = g.grid[0], g.grid[-1]
            target = function_library(g.function_id, (t - lo) / (hi - lo))
        est = spline_matrix(params.basis, t) @ means[g.cls - 1][:, g.feature - 1]
        errs.append((est - target) ** 2)
    return float(np.mean(np.concatenate(errs)))


@dataclass
class EvalReport:
    pipeline: str
    macro_f1: float
    per_class_f1: list
    confusion: list
    n_test: int
    functional_mse: Optional[float] = None
    runtimes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _embed_matrix(model, dataset):
    return np.stack([embed(model, s).vector for s in dataset])


def evaluate(train, test, pipeline="bayes", *, b=7, r=2, config=None, seed=0,
             ridge_lambda=1.0, truth=None, model=None):
    """Run one train/test pipeline and score it."""
    if pipeline not in PIPELINES:
        raise ValidationError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")
    test.require_labeled()
    k = max(train.num_classes, test.num_classes)
    runtimes = {}
    fitted = None

    if pipeline in ("bayes", "ridge"):
        t0 = time.perf_counter()
        fitted = model or fit(train, b, r, config or FitConfig(), rng=seed)
        runtimes["fit"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        if pipeline == "bayes":
            pred = predict(fitted, test.samples)
            if any(p is None for p in pred):
                raise NumericalError("some test samples could not be classified")
        else:
            w = ridge_fit(_embed_matrix(fitted, train), train.labels, ridge_lambda, k)
            pred = ridge_predict(_embed_matrix(fitted, test), w)
        runtimes["predict"] = time.perf_counter() - t0
    else:
        t0 = time.perf_counter()
        n_feat = max(train.feature_count, test.feature_count)
        if pipeline == "pad-imputation":
            grid = np.unique(np.concatenate([s.times for s in list(train) + list(test)]))
            tr, te = pad_imputation(train, grid, n_feat), pad_imputation(test, grid, n_feat)
        else:
            max_t = max(s.n_times for s in list(train) + list(test))
            tr, te = pad_end(train, n_feat, max_t), pad_end(test, n_feat, max_t)
        w = ridge_fit(tr.design, tr.labels, ridge_lambda, k)
        pred = ridge_predict(te.design, w)
        runtimes["predict"] = time.perf_counter() - t0

    pred = np.asarray(pred, dtype=int)
    truth_labels = test.labels
    f1 = per_class_f1(pred, truth_labels, k)
    mse = functional_mse(fitted, truth) if (truth and fitted is not None) else None
    return EvalReport(
        pipeline=pipeline,
        macro_f1=float(f1.mean()),
        per_class_f1=f1.tolist(),
        confusion=confusion_matrix(pred, truth_labels, k).tolist(),
        n_test=len(test),
        functional_mse=mse,
        runtimes=runtimes,
    )


def bench(dataset, b, r, repeats=10, config=None, seed=0):
    """Wall-clock statistics of ``repeats`` independent fits (I/O excluded)."""
    times = []
    for i in range(repeats):
        t0 = time.perf_counter()
        fit(dataset, b, r, config or FitConfig(), rng=seed + i)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return {
        "repeats": repeats,
        "mean": float(t.mean()),
        "std": float(t.std(ddof=1)) if repeats > 1 else 0.0,
        "median": float(np.median(t)),
        "min": float(t.min()),
        "max": float(t.max()),
        "times": times,
    }
