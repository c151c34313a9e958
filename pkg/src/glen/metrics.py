"""F1 metric suite over single- and multi-label predictions."""
from __future__ import annotations

import numpy as np


def as_label_matrix(values, classes: int) -> np.ndarray:
    """Accept class indices (1-D ints) or 0/1 label matrices."""
    arr = np.asarray(values)
    if arr.ndim == 1:
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ValueError(f"class index out of range [0, {classes})")
        out = np.zeros((arr.shape[0], classes), dtype=np.int64)
        out[np.arange(arr.shape[0]), arr.astype(np.int64)] = 1
        return out
    if arr.ndim == 2:
        if arr.shape[1] != classes:
            raise ValueError(f"expected {classes} label columns, got {arr.shape[1]}")
        return (arr != 0).astype(np.int64)
    raise ValueError(f"labels must be 1-D indices or a 2-D matrix, got shape {arr.shape}")


def f1_suite(predictions, truths, classes: int) -> tuple[float, float, float]:
    """(weighted, micro, macro) F1 with the 0/0 := 0 convention per class.

    Weighted averages per-class F1 by true support; micro pools TP/FP/FN
    over all classes.
    """
    pred = as_label_matrix(predictions, classes)
    true = as_label_matrix(truths, classes)
    if pred.shape[0] != true.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions vs {true.shape[0]} truths")
    if pred.shape[0] == 0:
        raise ValueError("empty input")
    tp = ((pred == 1) & (true == 1)).sum(axis=0).astype(np.float64)
    fp = ((pred == 1) & (true == 0)).sum(axis=0).astype(np.float64)
    fn = ((pred == 0) & (true == 1)).sum(axis=0).astype(np.float64)

    def safe_div(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    precision = safe_div(tp, tp + fp)
    recall = safe_div(tp, tp + fn)
    f1 = safe_div(2 * precision * recall, precision + recall)
    support = true.sum(axis=0).astype(np.float64)
    weighted = float(f1 @ support / support.sum()) if support.sum() > 0 else 0.0
    macro = float(f1.mean())
    micro_p = tp.sum() / max(tp.sum() + fp.sum(), 1e-300)
    micro_r = tp.sum() / max(tp.sum() + fn.sum(), 1e-300)
    micro = float(
        2 * micro_p * micro_r / (micro_p + micro_r) if (micro_p + micro_r) > 0 else 0.0
    )
    return weighted, micro, macro
