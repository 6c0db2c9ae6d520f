"""Confusion matrices, UAR and UF1."""

from __future__ import annotations

import warnings

import numpy as np


class MetricError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise MetricError("y_true and y_pred differ in length")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise MetricError("class index out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise MetricError("confusion matrix has negative counts")
    return cm.astype(np.float64)


def per_class_recall(cm) -> np.ndarray:
    cm = _check(cm)
    n = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, np.diag(cm) / n, np.nan)


def compute_uar(cm, allow_empty: bool = False) -> float:
    """Unweighted average recall, ``mean_c TP_c / N_c``.

    A class without true samples is an error unless ``allow_empty`` is set,
    in which case it is skipped.
    """
    rec = per_class_recall(cm)
    empty = np.isnan(rec)
    if empty.any():
        if not allow_empty:
            raise MetricError(f"classes {np.flatnonzero(empty).tolist()} have no samples")
        if empty.all():
            raise MetricError("confusion matrix is empty")
        return float(rec[~empty].mean())
    return float(rec.mean())


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a zero denominator gives F1 = 0 (with a warning)."""
    cm = _check(cm)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    out = np.zeros(len(tp))
    for c in range(len(tp)):
        p = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        r = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] > 0 else 0.0
        if p + r == 0:
            warnings.warn(f"class {c}: precision and recall are both zero, F1 set to 0", RuntimeWarning,
                          stacklevel=2)
            continue
        out[c] = 2 * p * r / (p + r)
    return out


def compute_uf1(cm) -> float:
    return float(per_class_f1(cm).mean())
