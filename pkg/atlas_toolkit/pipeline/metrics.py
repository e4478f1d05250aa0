"""Overlap and correlation metrics for evaluating segmentations and bias estimates."""

from typing import Optional

import numpy as np
from scipy.stats import pearsonr

from ..core.errors import InvalidInputError


def dice_score(seg_a: np.ndarray, seg_b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(seg_a).astype(bool)
    b = np.asarray(seg_b).astype(bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / total


def per_class_dice(labels_a: np.ndarray, labels_b: np.ndarray, classes=None) -> dict[int, float]:
    """Dice of each label value present in either map (0 is background and skipped)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise InvalidInputError(f"label map shapes differ: {a.shape} vs {b.shape}")
    if classes is None:
        classes = sorted(int(v) for v in np.union1d(np.unique(a), np.unique(b)) if v != 0)
    return {int(k): dice_score(a == k, b == k) for k in classes}


def hard_segmentation(gamma: np.ndarray) -> np.ndarray:
    """1-based argmax labels from responsibilities (..., K)."""
    return np.argmax(gamma, axis=-1).astype(np.int32) + 1


def pearson_correlation(field_a: np.ndarray, field_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    a = np.asarray(field_a, dtype=np.float64)
    b = np.asarray(field_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"field shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != a.shape:
        raise InvalidInputError(f"mask shape {mask.shape} does not match fields {a.shape}")
    x, y = a[mask].ravel(), b[mask].ravel()
    if x.size < 2:
        raise InvalidInputError("pearson_correlation needs at least 2 masked voxels")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise InvalidInputError("pearson_correlation is undefined for a constant field")
    r, _ = pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))
