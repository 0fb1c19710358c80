"""Evaluation metrics over per-class sigmoid scores.

The decision rule is argmax over the independent class scores (lowest
index on ties).  AUROC is one-vs-rest per class.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class PredictionMatrix:
    scores: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    sample_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.class_names):
            raise ValueError(f"scores must be (N, {len(self.class_names)}), got {self.scores.shape}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("need exactly one label per score row")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label index out of range")
        if self.sample_ids is None:
            self.sample_ids = [str(i) for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def decide(scores) -> np.ndarray | int:
    """Argmax class; ``np.argmax`` already returns the first maximum."""
    scores = np.asarray(scores)
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=1)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1..end
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both positives and negatives are present")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """Exact ROC: one point per distinct threshold, from (0, 0) to (1, 1).

    Returns ``(fpr, tpr, thresholds)``; the first threshold is ``+inf``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    n_pos, n_neg = y.sum(), (~y).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC is undefined unless both positives and negatives are present")
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, s[last_of_run]]


def trapezoid_auc(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """Rows are truth, columns are predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def _ratio(num, den) -> float:
    return float(num / den) if den else float("nan")


def per_class_rates(cm: np.ndarray):
    """Sensitivity (recall) and PPV (precision) per class from a confusion matrix."""
    tp = np.diag(cm)
    sens = [_ratio(tp[c], cm[c, :].sum()) for c in range(len(cm))]
    ppv = [_ratio(tp[c], cm[:, c].sum()) for c in range(len(cm))]
    return sens, ppv


def macro_f1(labels, predictions, num_classes: int) -> float:
    """Macro F1 over classes present in the truth or the predictions.

    Classes with neither support nor predictions are undefined and skipped;
    a class whose precision and recall are both 0 contributes 0.
    """
    cm = confusion_matrix(labels, predictions, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    terms = []
    for c in range(num_classes):
        if support[c] == 0 and predicted[c] == 0:
            continue
        denom = support[c] + predicted[c]
        terms.append(2 * tp[c] / denom)
    return float(np.mean(terms)) if terms else float("nan")


@dataclass
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    full_sample: float
    resamples: int
    resample_size: int
    seed: int
    values: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"f1_point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "f1_full_sample": self.full_sample, "resamples": self.resamples,
                "resample_size": self.resample_size, "seed": self.seed, "confidence": 0.95}


def bootstrap_f1(pred: PredictionMatrix, resamples: int = 100, resample_size: int = 100,
                 seed: int = 0) -> BootstrapResult:
    """Bootstrap distribution of macro F1 under the argmax decision rule.

    Each resample draws ``resample_size`` rows with replacement from its own
    stream seeded by ``(seed, resample index)``.  The point estimate is the
    mean over resamples; the interval spans the 2.5th and 97.5th percentiles.
    """
    if resamples < 1 or resample_size < 1:
        raise ValueError("resamples and resample_size must be >= 1")
    if len(pred) == 0:
        raise ValueError("empty prediction matrix")
    yhat = decide(pred.scores)
    n, c = len(pred), pred.num_classes
    values = np.empty(resamples)
    for i in range(resamples):
        idx = np.random.default_rng([seed, i]).integers(0, n, size=resample_size)
        values[i] = macro_f1(pred.labels[idx], yhat[idx], c)
    lo, hi = np.percentile(values, [2.5, 97.5])
    return BootstrapResult(float(values.mean()), float(lo), float(hi),
                           macro_f1(pred.labels, yhat, c), resamples, resample_size, seed, values)


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    auroc: list[float | None]
    sensitivity: list[float]
    ppv: list[float]
    accuracy: float
    confusion: np.ndarray
    roc: list[tuple[np.ndarray, np.ndarray] | None]
    bootstrap: BootstrapResult | None = None

    @property
    def mean_auroc(self) -> float:
        vals = [a for a in self.auroc if a is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        per_class = {
            name: {"auroc": clean(self.auroc[i]), "sensitivity": clean(self.sensitivity[i]),
                   "ppv": clean(self.ppv[i]), "support": int(self.confusion[i].sum())}
            for i, name in enumerate(self.class_names)
        }
        roc = {name: None if r is None else {"fpr": r[0].tolist(), "tpr": r[1].tolist()}
               for name, r in zip(self.class_names, self.roc)}
        return {
            "classes": list(self.class_names),
            "n": int(self.confusion.sum()),
            "accuracy": self.accuracy,
            "mean_auroc": clean(self.mean_auroc),
            "per_class": per_class,
            "confusion_matrix": self.confusion.tolist(),
            "roc": roc,
            "bootstrap_f1": None if self.bootstrap is None else self.bootstrap.to_dict(),
        }

    def table_rows(self) -> list[list]:
        rows = [["class", "auroc", "sensitivity", "ppv", "support"]]
        for i, name in enumerate(self.class_names):
            rows.append([name, _fmt(self.auroc[i]), _fmt(self.sensitivity[i]), _fmt(self.ppv[i]),
                         int(self.confusion[i].sum())])
        rows.append(["mean/overall", _fmt(self.mean_auroc), "", "", int(self.confusion.sum())])
        rows.append(["accuracy", _fmt(self.accuracy), "", "", ""])
        return rows


def _fmt(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def evaluate(pred: PredictionMatrix, bootstrap_resamples: int | None = None,
             bootstrap_size: int = 100, seed: int = 0) -> EvalReport:
    if len(pred) == 0:
        raise ValueError("cannot evaluate an empty prediction matrix")
    c = pred.num_classes
    yhat = decide(pred.scores)
    cm = confusion_matrix(pred.labels, yhat, c)
    sens, ppv = per_class_rates(cm)
    aucs, rocs = [], []
    for k in range(c):
        y = pred.labels == k
        if y.all() or not y.any():
            aucs.append(None)
            rocs.append(None)
            continue
        aucs.append(auroc(pred.scores[:, k], y))
        fpr, tpr, _ = roc_curve(pred.scores[:, k], y)
        rocs.append((fpr, tpr))
    boot = None
    if bootstrap_resamples:
        boot = bootstrap_f1(pred, bootstrap_resamples, bootstrap_size, seed)
    return EvalReport(pred.class_names, aucs, sens, ppv, float(np.trace(cm) / cm.sum()), cm, rocs, boot)


# --------------------------------------------------------------------------- #
# Prediction file: header "sample_id,label,<class...>", one row per sample
# --------------------------------------------------------------------------- #

def write_predictions(pred: PredictionMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *pred.class_names])
        for sid, y, row in zip(pred.sample_ids, pred.labels, pred.scores):
            w.writerow([sid, pred.class_names[y], *(repr(float(v)) for v in row)])


def read_predictions(path) -> PredictionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 4 or header[0] != "sample_id" or header[1] != "label":
            raise ValueError(f"{path}: expected header 'sample_id,label,<class names...>'")
        classes = tuple(header[2:])
        ids, labels, scores = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            lbl = row[1]
            labels.append(classes.index(lbl) if lbl in classes else int(lbl))
            scores.append([float(v) for v in row[2:]])
    return PredictionMatrix(np.array(scores).reshape(-1, len(classes)), labels, classes, ids)


def predictions_from_arrays(scores: Sequence, labels: Sequence[int], class_names, ids=None) -> PredictionMatrix:
    return PredictionMatrix(np.asarray(scores), np.asarray(labels), class_names, ids)
