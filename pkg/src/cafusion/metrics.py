"""Classification metrics: one-vs-rest precision/recall/F1, macro or weighted."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    precision: np.ndarray  # per class
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    count: int

    def summary(self) -> dict[str, float]:
        return {
            "precision": self.macro_precision, "recall": self.macro_recall,
            "f1": self.macro_f1, "accuracy": self.accuracy,
        }

    def class_accuracy(self) -> np.ndarray:
        """Per-class recall, i.e. the fraction of each true class predicted correctly."""
        return self.recall.copy()


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def _div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise ratio with 0/0 defined as 0."""
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(true_labels, predicted_labels, num_classes: int, average: str = "macro") -> MetricsReport:
    """Metrics from label vectors.

    ``average="macro"`` takes the unweighted mean of per-class values (macro
    F1 is the mean of per-class F1, not F1 of the averaged P/R);
    ``"weighted"`` weights classes by their true counts.
    """
    true = np.asarray(true_labels)
    pred = np.asarray(predicted_labels)
    if true.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if true.shape != pred.shape:
        raise ValueError("true and predicted labels differ in length")
    if average not in ("macro", "weighted"):
        raise ValueError("average must be 'macro' or 'weighted'")
    cm = confusion_matrix(true, pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    precision = _div(tp, cm.sum(axis=0))
    recall = _div(tp, cm.sum(axis=1))
    f1 = _div(2 * precision * recall, precision + recall)
    if average == "macro":
        w = np.full(num_classes, 1.0 / num_classes)
    else:
        w = cm.sum(axis=1) / cm.sum()
    return MetricsReport(
        precision, recall, f1,
        float(w @ precision), float(w @ recall), float(w @ f1),
        float(tp.sum() / cm.sum()), cm, int(cm.sum()),
    )
