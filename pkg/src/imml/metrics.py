"""Regression and macro-averaged classification metrics."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {target.size} targets")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, target


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def r2(pred, target) -> Optional[float]:
    """Coefficient of determination; ``None`` when the target is constant."""
    pred, target = _pair(pred, target)
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        return None
    return 1.0 - float(np.sum((pred - target) ** 2)) / ss_tot


def confusion_matrix(pred_classes, target_classes, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred_classes).reshape(-1)
    target = np.asarray(target_classes).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError("length mismatch")
    if pred.size == 0:
        raise ValueError("empty input")
    for name, arr in (("prediction", pred), ("target", target)):
        if arr.min() < 0 or arr.max() >= n_classes or not np.all(arr == np.round(arr)):
            raise ValueError(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (target.astype(np.int64), pred.astype(np.int64)), 1)
    return cm


def macro_classification_metrics(pred_classes, target_classes, n_classes: int) -> Dict:
    """Unweighted per-class averages from the confusion matrix (rows = truth).

    Accuracy is the mean per-class recall. A zero denominator yields 0 for that
    class; such classes are listed under ``zero_division``.
    """
    cm = confusion_matrix(pred_classes, target_classes, n_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    zero_div = sorted(set(np.flatnonzero(predicted == 0)) | set(np.flatnonzero(actual == 0)))
    return {
        "accuracy": float(recall.mean()),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "zero_division": [int(c) for c in zero_div],
    }
