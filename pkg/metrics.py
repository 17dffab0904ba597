"""Binary evaluation metrics. The positive class is cancer (label 1).

Ratios with a zero denominator are NaN and named in ``MetricsReport.flags``;
they are never coerced to 0 or 1.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from errors import ArgumentError, ShapeError

logger = logging.getLogger(__name__)

# Kaggle log-loss convention
LOG_LOSS_EPS = 1e-15


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_labels(values, name: str) -> np.ndarray:
    arr = np.asarray(values).reshape(-1)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ArgumentError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(preds, labels) -> ConfusionMatrix:
    preds = _as_labels(preds, "preds")
    labels = _as_labels(labels, "labels")
    if preds.shape != labels.shape:
        raise ArgumentError(f"preds and labels differ in length ({preds.size} vs {labels.size})")
    if labels.size == 0:
        raise ArgumentError("confusion needs at least one sample")
    return ConfusionMatrix(
        tp=int(np.sum((preds == 1) & (labels == 1))),
        fp=int(np.sum((preds == 1) & (labels == 0))),
        tn=int(np.sum((preds == 0) & (labels == 0))),
        fn=int(np.sum((preds == 0) & (labels == 1))),
    )


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator > 0 else math.nan


def sensitivity(cm: ConfusionMatrix) -> float:
    """TP / (TP + FN)"""
    return _ratio(cm.tp, cm.tp + cm.fn)


def specificity(cm: ConfusionMatrix) -> float:
    """TN / (TN + FP)"""
    return _ratio(cm.tn, cm.tn + cm.fp)


def ppv(cm: ConfusionMatrix) -> float:
    """TP / (TP + FP)"""
    return _ratio(cm.tp, cm.tp + cm.fp)


def f1(ppv_value: float, tpr_value: float) -> float:
    """Harmonic mean of precision and recall"""
    if math.isnan(ppv_value) or math.isnan(tpr_value):
        return math.nan
    if ppv_value == 0 and tpr_value == 0:
        return math.nan
    return 2 * ppv_value * tpr_value / (ppv_value + tpr_value)


# ==========================
# LOG-LOSS
# ==========================
def _true_class_probs(probs, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _as_labels(labels, "labels")
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != labels.size:
        raise ShapeError(f"probs must be [N,2] matching {labels.size} labels, got {probs.shape}")
    if labels.size == 0:
        raise ArgumentError("log-loss needs at least one sample")
    q = probs[np.arange(labels.size), labels]
    return np.clip(q, LOG_LOSS_EPS, 1 - LOG_LOSS_EPS)


def cancer_class_weight(labels) -> Optional[float]:
    """f_cancer_free / f_cancer, or None when a class is absent"""
    labels = _as_labels(labels, "labels")
    n_cancer = int(labels.sum())
    n_free = labels.size - n_cancer
    if n_cancer == 0 or n_free == 0:
        return None
    return n_free / n_cancer


def weighted_log_loss(probs, labels) -> float:
    """Mean of -w(c) ln q over samples; NaN when only one class is present"""
    q = _true_class_probs(probs, labels)
    weight = cancer_class_weight(labels)
    if weight is None:
        return math.nan
    labels = _as_labels(labels, "labels")
    w = np.where(labels == 1, weight, 1.0)
    return float(np.mean(-w * np.log(q)))


def unweighted_log_loss(probs, labels) -> float:
    q = _true_class_probs(probs, labels)
    return float(np.mean(-np.log(q)))


# ==========================
# REPORT
# ==========================
@dataclass
class MetricsReport:
    sensitivity: float
    specificity: float
    ppv: float
    tpr: float
    f1: float
    accuracy: float
    balanced_accuracy: float
    weighted_log_loss: float
    unweighted_log_loss: float
    confusion: ConfusionMatrix
    n_samples: int
    n_cancer: int
    n_cancer_free: int
    threshold: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        def clean(value):
            return None if isinstance(value, float) and math.isnan(value) else value

        return {
            "sensitivity": clean(self.sensitivity),
            "specificity": clean(self.specificity),
            "ppv": clean(self.ppv),
            "tpr": clean(self.tpr),
            "f1": clean(self.f1),
            "accuracy": clean(self.accuracy),
            "weighted_log_loss": clean(self.weighted_log_loss),
            "tp": self.confusion.tp,
            "fp": self.confusion.fp,
            "tn": self.confusion.tn,
            "fn": self.confusion.fn,
            "n": self.n_samples,
            "threshold": self.threshold,
            "flags": list(self.flags),
            "balanced_accuracy": clean(self.balanced_accuracy),
            "unweighted_log_loss": clean(self.unweighted_log_loss),
            "class_counts": {"cancer": self.n_cancer, "cancer_free": self.n_cancer_free},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def build_report(probs, labels, threshold: float = 0.5) -> MetricsReport:
    """Assemble every metric from predicted probabilities"""
    probs = np.asarray(probs)
    labels = _as_labels(labels, "labels")
    preds = (probs[:, 1] >= threshold).astype(np.int64)
    cm = confusion(preds, labels)

    sens = sensitivity(cm)
    spec = specificity(cm)
    precision = ppv(cm)
    f1_value = f1(precision, sens)
    weighted = weighted_log_loss(probs, labels)

    flags = []
    for name, value in (("sensitivity", sens), ("specificity", spec), ("ppv", precision), ("f1", f1_value)):
        if math.isnan(value):
            flags.append(f"{name}_undefined")
    if math.isnan(weighted):
        flags.append("weighted_log_loss_undefined_single_class")

    n_cancer = int(labels.sum())
    return MetricsReport(
        sensitivity=sens,
        specificity=spec,
        ppv=precision,
        tpr=sens,
        f1=f1_value,
        accuracy=(cm.tp + cm.tn) / cm.n,
        balanced_accuracy=(sens + spec) / 2,
        weighted_log_loss=weighted,
        unweighted_log_loss=unweighted_log_loss(probs, labels),
        confusion=cm,
        n_samples=cm.n,
        n_cancer=n_cancer,
        n_cancer_free=cm.n - n_cancer,
        threshold=threshold,
        flags=flags,
    )


def predict_dataset(net, images, batch_size: int = 64) -> np.ndarray:
    """Probabilities for a stack of images, computed batch by batch"""
    chunks = [net.predict_proba(images[start:start + batch_size])
              for start in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate(net, dataset, threshold: float = 0.5, batch_size: int = 64) -> MetricsReport:
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate an empty dataset")
    probs = predict_dataset(net, dataset.images, batch_size)
    report = build_report(probs, dataset.labels, threshold)
    if report.flags:
        logger.warning(f"⚠️ Undefined metrics: {', '.join(report.flags)}")
    return report


# ==========================
# TEXT FORMS
# ==========================
def format_confusion_matrix(cm: ConfusionMatrix) -> str:
    """Rows are actual classes, columns predicted classes"""
    def rate(count, total):
        return f"{count / total:6.1%}" if total else "   n/a"

    cancer_total = cm.tp + cm.fn
    free_total = cm.tn + cm.fp
    width = max(8, len(str(cm.n)))
    lines = [
        "Confusion matrix (rows: actual, columns: predicted)",
        f"{'':>14} {'cancer':>{width}} {'cancer-free':>{width + 3}}",
        f"{'cancer':>14} {cm.tp:>{width}} {cm.fn:>{width + 3}}   TPR {rate(cm.tp, cancer_total)}",
        f"{'cancer-free':>14} {cm.fp:>{width}} {cm.tn:>{width + 3}}   TNR {rate(cm.tn, free_total)}",
    ]
    return "\n".join(lines)


def format_report(report: MetricsReport) -> str:
    def show(value):
        return "  n/a" if math.isnan(value) else f"{value:.3f}"

    lines = [
        f"{'Sensitivity':>12} {'Specificity':>12} {'F1':>8} {'Log-loss':>10}",
        f"{show(report.sensitivity):>12} {show(report.specificity):>12} "
        f"{show(report.f1):>8} {show(report.weighted_log_loss):>10}",
        "",
        format_confusion_matrix(report.confusion),
    ]
    if report.flags:
        lines.append(f"flags: {', '.join(report.flags)}")
    return "\n".join(lines)
