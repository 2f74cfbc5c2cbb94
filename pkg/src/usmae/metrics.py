"""Classification metrics: confusion matrix, averaged scores, one-vs-rest curves."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass
class PredictionSet:
    """True labels plus per-class scores (rows sum to one)."""

    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.labels.shape[0]:
            raise ValueError(f"scores {self.scores.shape} do not match {self.labels.shape[0]} labels")
        if self.labels.size == 0:
            raise ValueError("empty prediction set")
        _check_labels(self.labels, self.num_classes)

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        # argmax returns the lowest index among ties
        return self.scores.argmax(axis=1)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")


def confusion_matrix(labels, predicted=None, num_classes: int = 5) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class.

    Accepts either ``(labels, predicted)`` arrays or a single :class:`PredictionSet`.
    """
    if isinstance(labels, PredictionSet):
        labels, predicted, num_classes = labels.labels, labels.predicted, labels.num_classes
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty prediction set")
    _check_labels(labels, num_classes)
    _check_labels(predicted, num_classes)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def per_class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall, F1 and support; zero where undefined."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1, support


def weighted_metrics(labels, predicted=None, num_classes: int = 5, average: str = "weighted") -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1) averaged by support or uniformly."""
    if isinstance(labels, PredictionSet):
        labels, predicted, num_classes = labels.labels, labels.predicted, labels.num_classes
    cm = confusion_matrix(labels, predicted, num_classes)
    precision, recall, f1, support = per_class_scores(cm)
    total = cm.sum()
    accuracy = np.trace(cm) / total
    if average == "weighted":
        # support * recall is exactly the true-positive count, so weighted recall == accuracy bit for bit
        tp = np.diag(cm).astype(np.float64)
        return (
            float(accuracy),
            float((support * precision).sum() / total),
            float(tp.sum() / total),
            float((support * f1).sum() / total),
        )
    if average == "macro":
        return float(accuracy), float(precision.mean()), float(recall.mean()), float(f1.mean())
    raise ValueError(f"average must be 'weighted' or 'macro', got {average!r}")


def _binary_counts(labels, scores, class_index):
    if isinstance(labels, PredictionSet):
        labels, scores, class_index = labels.labels, labels.scores, scores
    labels = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, class_index]
    positive = labels == class_index
    thresholds = np.unique(s)[::-1]
    # samples scoring >= threshold are called positive
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], positive[order]
    cum_tp = np.cumsum(pos_sorted)
    cum_fp = np.cumsum(~pos_sorted)
    last = np.searchsorted(-s_sorted, -thresholds, side="right") - 1
    return thresholds, cum_tp[last], cum_fp[last], int(positive.sum()), int((~positive).sum())


@dataclass
class Curve:
    """Curve points ``(threshold, x, y)`` and the area under them."""

    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    area: float


def roc_curve_ovr(labels, scores, class_index: Optional[int] = None) -> Curve:
    """One-vs-rest ROC; points are (FPR, TPR), area by the trapezoidal rule."""
    thresholds, tp, fp, n_pos, n_neg = _binary_counts(labels, scores, class_index)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined ROC: class needs both positives and negatives")
    thresholds = np.concatenate([[np.inf], thresholds])
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve(thresholds, fpr, tpr, area)


def pr_curve_ovr(labels, scores, class_index: Optional[int] = None) -> Curve:
    """One-vs-rest precision-recall; points are (recall, precision), area = average precision."""
    thresholds, tp, fp, n_pos, _ = _binary_counts(labels, scores, class_index)
    if n_pos == 0:
        raise ValueError("undefined precision-recall curve: class has no positives")
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    return Curve(thresholds, recall, precision, ap)


@dataclass
class MetricsReport:
    classes: tuple
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    average: str = "weighted"
    roc: dict = field(default_factory=dict)
    pr: dict = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        out = {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}
        for name, curve in self.roc.items():
            out[f"roc_auc_{name}"] = curve.area
        for name, curve in self.pr.items():
            out[f"average_precision_{name}"] = curve.area
        return out


def build_report(preds: PredictionSet, classes: Sequence[str], average: str = "weighted") -> MetricsReport:
    k = preds.num_classes
    cm = confusion_matrix(preds.labels, preds.predicted, k)
    acc, prec, rec, f1 = weighted_metrics(preds.labels, preds.predicted, k, average)
    roc, pr = {}, {}
    for c, name in enumerate(classes):
        positives = int((preds.labels == c).sum())
        # classes absent from (or covering all of) the split have no curve
        if 0 < positives < len(preds.labels):
            roc[name] = roc_curve_ovr(preds.labels, preds.scores, c)
        if positives:
            pr[name] = pr_curve_ovr(preds.labels, preds.scores, c)
    return MetricsReport(tuple(classes), cm, acc, prec, rec, f1, average, roc, pr)


def _write_rows(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    os.replace(tmp, path)


def write_report(report: MetricsReport, out_dir) -> list[Path]:
    """Emit metrics.csv, confusion.csv, roc_<class>.csv and pr_<class>.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "metrics.csv"
    _write_rows(path, [("metric", "value"), ("average", report.average)] + [(k, repr(v)) for k, v in report.summary().items()])
    written.append(path)
    path = out_dir / "confusion.csv"
    rows = [("true\\predicted",) + tuple(report.classes)]
    rows += [(name,) + tuple(int(v) for v in row) for name, row in zip(report.classes, report.confusion)]
    _write_rows(path, rows)
    written.append(path)
    for prefix, curves in (("roc", report.roc), ("pr", report.pr)):
        for name, curve in curves.items():
            path = out_dir / f"{prefix}_{name}.csv"
            rows = [("threshold", "x", "y")]
            rows += [(repr(float(t)), repr(float(a)), repr(float(b))) for t, a, b in zip(curve.thresholds, curve.x, curve.y)]
            _write_rows(path, rows)
            written.append(path)
    return written
