"""Overlap metrics for binary segmentation masks.

Masks are compared in pixel space after decoding and thresholding, never in
latent space. Values must be binary ({0,1} or bool); anything else is a data
error rather than a silent cast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError


@dataclass(frozen=True)
class SegmentationMetrics:
    dice: float
    iou: float


def _as_bool_mask(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise DataError(f"{name} is not binary; found values {values[:8].tolist()}")
    return arr.astype(bool)


def dice_iou(pred, gt) -> SegmentationMetrics:
    """dice = 2|P&G| / (|P|+|G|), iou = |P&G| / |P or G|; both-empty scores 1."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: pred {p.shape} vs gt {g.shape}")
    inter = int(np.count_nonzero(p & g))
    p_sum = int(np.count_nonzero(p))
    g_sum = int(np.count_nonzero(g))
    if p_sum + g_sum == 0:
        return SegmentationMetrics(dice=1.0, iou=1.0)
    union = p_sum + g_sum - inter
    return SegmentationMetrics(dice=2.0 * inter / (p_sum + g_sum), iou=inter / union)


def mean_metrics(per_image: Sequence[SegmentationMetrics]) -> SegmentationMetrics:
    """Unweighted mean over images, the convention behind every reported score."""
    if not per_image:
        raise DataError("cannot average metrics over an empty collection")
    return SegmentationMetrics(
        dice=float(np.mean([m.dice for m in per_image])),
        iou=float(np.mean([m.iou for m in per_image])),
    )


def evaluate_masks(preds: Iterable, gts: Iterable) -> SegmentationMetrics:
    per_image = [dice_iou(p, g) for p, g in zip(preds, gts)]
    return mean_metrics(per_image)
