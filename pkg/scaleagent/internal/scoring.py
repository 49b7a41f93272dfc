"""
Segmentation scores (confusion matrix, mIoU, mF1, Score) and the patch / map
rewards built on them.

Classes absent from both truth and prediction are excluded from the means.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import ShapeError, UndefinedScoreError


@dataclass
class RewardRecord:
    """Reward bookkeeping for one timestep."""
    t: int
    action: int
    reward: float
    map_bonus: Optional[float] = None

    @property
    def total(self) -> float:
        return self.reward + (self.map_bonus or 0.0)


def _infer_classes(y: np.ndarray, y_hat: np.ndarray) -> int:
    if y.size == 0:
        return 1
    return int(max(y.max(), y_hat.max())) + 1


def confusion(y: np.ndarray, y_hat: np.ndarray, classes: Optional[int] = None) -> np.ndarray:
    """K x K counts; entry (i, j) is pixels with truth i predicted j."""
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"Mask shapes differ: {y.shape} vs {y_hat.shape}")
    K = _infer_classes(y, y_hat) if classes is None else int(classes)
    if y.size == 0:
        return np.zeros((K, K), dtype=np.int64)
    for name, mask in (("truth", y), ("prediction", y_hat)):
        if mask.min() < 0 or mask.max() >= K:
            raise ShapeError(f"{name} has class values outside [0, {K})")
    flat = K * y.astype(np.int64).ravel() + y_hat.astype(np.int64).ravel()
    return np.bincount(flat, minlength=K * K).reshape(K, K)


def _per_class_counts(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() == 0:
        raise UndefinedScoreError("Confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class, NaN for classes absent from truth and prediction."""
    tp, fp, fn = _per_class_counts(cm)
    denom = tp + fp + fn
    out = np.full(tp.shape, np.nan)
    present = denom > 0
    out[present] = tp[present] / denom[present]
    return out


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp, fp, fn = _per_class_counts(cm)
    denom = 2 * tp + fp + fn
    out = np.full(tp.shape, np.nan)
    present = denom > 0
    out[present] = 2 * tp[present] / denom[present]
    return out


def _present_mean(values: np.ndarray) -> float:
    present = ~np.isnan(values)
    if not present.any():
        raise UndefinedScoreError("Every class is absent from truth and prediction")
    return float(values[present].mean())


def miou(cm: np.ndarray) -> float:
    return _present_mean(per_class_iou(cm))


def mf1(cm: np.ndarray) -> float:
    return _present_mean(per_class_f1(cm))


def score(y: np.ndarray, y_hat: np.ndarray, classes: Optional[int] = None) -> float:
    """mIoU + mF1, in [0, 2]."""
    cm = confusion(y, y_hat, classes)
    return miou(cm) + mf1(cm)


def patch_reward(y: np.ndarray, y_hat_a: np.ndarray, y_hat_local: np.ndarray,
                 classes: Optional[int] = None) -> float:
    """Score gain of the chosen-scale prediction over the local-only one."""
    if np.array_equal(y_hat_a, y_hat_local):
        if y.shape != y_hat_a.shape:
            raise ShapeError(f"Mask shapes differ: {y.shape} vs {y_hat_a.shape}")
        return 0.0
    return score(y, y_hat_a, classes) - score(y, y_hat_local, classes)


def map_reward(Y: np.ndarray, Y_hat: np.ndarray, Y_hat_local: np.ndarray, T: int,
               classes: Optional[int] = None) -> float:
    """Whole-image score gain scaled by the patch count."""
    if np.array_equal(Y_hat, Y_hat_local):
        if Y.shape != Y_hat.shape:
            raise ShapeError(f"Mask shapes differ: {Y.shape} vs {Y_hat.shape}")
        return 0.0
    return T * (score(Y, Y_hat, classes) - score(Y, Y_hat_local, classes))
