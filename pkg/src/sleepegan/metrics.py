"""Confusion matrices, accuracy, macro F1 and Cohen's kappa."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .data import STAGE_NAMES

N_CLASSES = 5


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Entry (i, j) counts samples of true class i predicted as j."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"truth and prediction lengths differ ({len(truth)} vs {len(pred)})")
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in 0..{n_classes - 1}")
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    acc: float
    mf1: float
    kappa: float
    per_class_f1: List[float]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def row(self) -> List[float]:
        return [self.acc, self.mf1, self.kappa, *self.per_class_f1]

    def __eq__(self, other):
        return (isinstance(other, MetricsReport) and np.array_equal(self.confusion, other.confusion)
                and self.row() == other.row())


REPORT_COLUMNS = ["acc", "mf1", "kappa"] + [f"f1_{n}" for n in STAGE_NAMES]


def metrics(confusion) -> MetricsReport:
    """Summary statistics of a square count matrix.

    Per-class F1 is 2TP / (2TP + FP + FN), which equals 2PR/(P+R) and is 0
    when a class is never predicted correctly. The macro average runs over
    classes that occur in the truth or the predictions; a class absent from
    both has no defined F1 and is left out (reported as 0).
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    denom = rows + cols  # 2TP + FP + FN
    present = denom > 0
    f1 = np.where(present, 2 * tp / np.where(present, denom, 1.0), 0.0)
    acc = tp.sum() / total
    p_e = float(np.dot(rows, cols) / (total * total))
    if p_e == 1.0:
        kappa = 1.0 if acc == 1.0 else 0.0
    else:
        kappa = (acc - p_e) / (1.0 - p_e)
    return MetricsReport(
        confusion=cm.astype(np.int64) if np.all(cm == np.round(cm)) else cm,
        acc=float(acc),
        mf1=float(f1[present].mean()),
        kappa=float(kappa),
        per_class_f1=[float(v) for v in f1],
    )


def accuracy_mf1(truth, pred) -> tuple[float, float]:
    rep = metrics(confusion_matrix(truth, pred))
    return rep.acc, rep.mf1
