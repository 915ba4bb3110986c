"""Confusion-matrix based segmentation metrics: OA, per-class F1 and IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import LabelMask


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (counts < 0).any():
            raise ValueError("negative counts")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, classes: int) -> ConfusionMatrix:
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.classes != self.classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, truth: LabelMask | np.ndarray, pred: LabelMask | np.ndarray) -> ConfusionMatrix:
    """Add every non-void truth pixel to a copy of ``cm``."""
    t = truth.data if isinstance(truth, LabelMask) else np.asarray(truth)
    p = pred.data if isinstance(pred, LabelMask) else np.asarray(pred)
    if t.shape != p.shape:
        raise ValueError(f"dimension mismatch: {t.shape} vs {p.shape}")
    c = cm.classes
    keep = (t >= 0) & (t < c)
    if ((p[keep] < 0) | (p[keep] >= c)).any():
        raise ValueError("prediction holds values outside the class range")
    flat = t[keep].astype(np.int64) * c + p[keep].astype(np.int64)
    return cm + ConfusionMatrix(np.bincount(flat, minlength=c * c).reshape(c, c))


def _tp_fp_fn(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return tp, fp, fn


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """2TP / (2TP + FP + FN), or 0 for a class absent from truth and prediction."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class TP / (TP + FP + FN) and its mean over classes with a non-empty union."""
    tp, fp, fn = _tp_fp_fn(cm)
    union = tp + fp + fn
    per_class = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    present = union > 0
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return per_class, mean


def report(cm: ConfusionMatrix) -> dict:
    per_iou, miou = iou(cm)
    return {
        "oa": overall_accuracy(cm),
        "per_class_f1": f1_per_class(cm).tolist(),
        "per_class_iou": per_iou.tolist(),
        "miou": miou,
        "pixels_evaluated": cm.total,
    }
