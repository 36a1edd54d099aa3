"""NMSE, mIoU and SNR bookkeeping."""

from __future__ import annotations

import numpy as np

NMSE_FLOOR_DB = -300.0


def nmse_db(estimate, truth) -> float | np.ndarray:
    """``10 log10(||estimate - truth||_F^2 / ||truth||_F^2)`` over the last two axes.

    A perfect estimate reports ``NMSE_FLOOR_DB`` instead of ``-inf``.
    """
    estimate = np.asarray(estimate, dtype=np.complex128)
    truth = np.asarray(truth, dtype=np.complex128)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    axes = (-2, -1) if truth.ndim >= 2 else None
    ref = np.sum(np.abs(truth) ** 2, axis=axes)
    if np.any(ref == 0):
        raise ValueError("NMSE undefined for an all-zero reference")
    err = np.sum(np.abs(estimate - truth) ** 2, axis=axes)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(err / ref)
    db = np.maximum(db, NMSE_FLOOR_DB)
    return float(db) if np.ndim(db) == 0 else db


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """``counts[i, j]`` = cells of true class ``i`` predicted as ``j``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"map shapes differ: {pred.shape} vs {truth.shape}")
    idx = num_classes * truth.ravel().astype(np.int64) + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def class_iou(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and truth."""
    tp = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(pred, truth, num_classes: int, absent: str = "skip") -> float:
    """Mean IoU over classes.

    ``absent`` decides what a class missing from both maps contributes:
    ``"skip"`` (excluded from the mean), ``"one"`` or ``"zero"``.
    """
    iou = class_iou(confusion_matrix(pred, truth, num_classes))
    if absent == "skip":
        return float(np.nanmean(iou))
    if absent in ("one", "zero"):
        return float(np.mean(np.nan_to_num(iou, nan=1.0 if absent == "one" else 0.0)))
    raise ValueError(f"unknown absent-class policy {absent!r}")


def snr_db_to_noise_variance(snr_db: float, power: float = 1.0) -> float:
    if not power > 0:
        raise ValueError("power must be positive")
    return power / 10.0 ** (snr_db / 10.0)


def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and the half-width of its normal-approximation 95% interval."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(1.959963984540054 * v.std(ddof=1) / np.sqrt(v.size))
