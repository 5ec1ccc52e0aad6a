#!/usr/bin/env python3
"""
Losses and Metrics Module for Harborsight
Focal loss for per-point classification, dice loss for segmentation and a
dataset-level IoU accumulator for mIoU, mIoU_t (object classes) and mIoU_d
(water / drivable area).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from mask_ops import NUM_CLASSES, OBJECT_INDICES, WATER_INDEX, MaskStack
from numerics import (
    Tensor, as_tensor, clamp_min, div, log, matmul, mean, mul, power, reshape, scale,
    shift, sum_all, sum_rows, take_rows,
)

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
DICE_EPS = 1e-6

TARGET_SUBSET: Tuple[int, ...] = OBJECT_INDICES
DRIVABLE_SUBSET: Tuple[int, ...] = (WATER_INDEX,)
SUBSETS = {"all": None, "targets": TARGET_SUBSET, "drivable": DRIVABLE_SUBSET}


class LossError(Exception):
    """Exception for invalid loss or metric inputs"""
    pass


@dataclass
class ClassWeights:
    """Per-class focal weights α and focusing exponent γ"""
    alpha: np.ndarray
    gamma: float = 2.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or not np.all(np.isfinite(self.alpha)) or np.any(self.alpha <= 0):
            raise LossError(f"alpha must be a finite positive vector → {self.alpha}")
        if self.gamma < 0:
            raise LossError(f"gamma must be non-negative → {self.gamma}")

    @classmethod
    def uniform(cls, num_classes: int = NUM_CLASSES, gamma: float = 2.0) -> "ClassWeights":
        return cls(np.ones(num_classes), gamma)


def alpha_from_frequencies(class_counts: Sequence[float]) -> np.ndarray:
    """
    Inverse-frequency weights normalized to mean 1

    α_c ∝ total / (C · max(count_c, 1)); unseen classes use a count of 1 and
    therefore receive the largest weight.

    Raises:
        LossError: If counts are negative or all zero
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0):
        raise LossError(f"Class counts must be a non-negative vector → {counts}")
    total = counts.sum()
    if total <= 0:
        raise LossError("Class counts are all zero")
    raw = total / (counts.size * np.maximum(counts, 1.0))
    return raw / raw.mean()


def focal_loss(probs: Tensor, targets: Sequence[int], weights: ClassWeights,
               valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over valid rows of -α_c (1 - p_c)^γ log(p_c), p_c the true-class probability

    Rows with target < 0 are treated as invalid. Probabilities are floored at
    1e-12 before the log.

    Args:
        probs: (N × C) probability rows
        targets: (N,) class indices
        weights: ClassWeights with len(alpha) == C
        valid: Optional (N,) boolean flags

    Returns:
        Scalar tensor; zero when no row is valid
    """
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    n, num_classes = probs.shape
    if targets.shape != (n,):
        raise LossError(f"targets shape {targets.shape} does not match {n} rows")
    if weights.alpha.shape[0] != num_classes:
        raise LossError(f"alpha has {weights.alpha.shape[0]} entries for {num_classes} classes")
    if np.any(targets >= num_classes):
        raise LossError(f"target class out of range [0, {num_classes})")
    keep = targets >= 0
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        return Tensor(0.0)

    row_targets = targets[rows]
    one_hot = np.zeros((rows.size, num_classes))
    one_hot[np.arange(rows.size), row_targets] = 1.0
    picked = matmul(mul(take_rows(probs, rows), Tensor(one_hot)), Tensor(np.ones((num_classes, 1))))
    if np.any(picked.data <= PROBABILITY_FLOOR):
        logger.info(f"Clamped {int((picked.data <= PROBABILITY_FLOOR).sum())} probabilities to {PROBABILITY_FLOOR}")
    p_true = clamp_min(picked, PROBABILITY_FLOOR)
    modulating = power(shift(scale(p_true, -1.0), 1.0), weights.gamma)
    alpha = Tensor(weights.alpha[row_targets].reshape(-1, 1))
    per_row = mul(mul(alpha, modulating), log(p_true))
    return scale(sum_all(per_row), -1.0 / rows.size)


def dice_loss(pred: Tensor, gt: Union[MaskStack, np.ndarray], eps: float = DICE_EPS) -> Tensor:
    """
    1 - (2 Σ p g + ε) / (Σ p + Σ g + ε), averaged over channels

    Args:
        pred: (H, W, C) or (N, C) probabilities
        gt: Same-shaped binary array, or a MaskStack laid out (C, H, W)
        eps: Smoothing term for empty channels
    """
    pred = as_tensor(pred)
    target = np.transpose(gt.channels, (1, 2, 0)) if isinstance(gt, MaskStack) else np.asarray(gt, dtype=np.float64)
    if target.shape != pred.shape:
        raise LossError(f"dice shape mismatch → pred {pred.shape}, gt {target.shape}")
    num_classes = pred.shape[-1]
    flat_pred = reshape(pred, (-1, num_classes))
    flat_gt = target.reshape(-1, num_classes)
    intersection = sum_rows(mul(flat_pred, Tensor(flat_gt)))
    numerator = shift(scale(intersection, 2.0), eps)
    denominator = shift(sum_rows(flat_pred) + Tensor(flat_gt.sum(axis=0)), eps)
    return shift(scale(mean(div(numerator, denominator)), -1.0), 1.0)


@dataclass
class IoUAccumulator:
    """Dataset-level intersection/union counts; merge() is associative"""
    num_classes: int = NUM_CLASSES
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> "IoUAccumulator":
        pred_labels = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
        gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
        if pred_labels.shape != gt_labels.shape:
            raise LossError(f"Label map size mismatch → {pred_labels.size} vs {gt_labels.size}")
        c = self.num_classes
        inter = np.bincount(gt_labels[pred_labels == gt_labels], minlength=c)[:c]
        pred_counts = np.bincount(pred_labels, minlength=c)[:c]
        gt_counts = np.bincount(gt_labels, minlength=c)[:c]
        self.intersection += inter
        self.union += pred_counts + gt_counts - inter
        return self

    def update_stacks(self, pred: MaskStack, gt: MaskStack) -> "IoUAccumulator":
        if pred.channels.shape != gt.channels.shape:
            raise LossError(f"Stack shape mismatch → {pred.channels.shape} vs {gt.channels.shape}")
        return self.update(pred.argmax(), gt.argmax())

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        if other.num_classes != self.num_classes:
            raise LossError("Cannot merge accumulators with different class counts")
        return IoUAccumulator(self.num_classes, self.intersection + other.intersection,
                              self.union + other.union)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth"""
        out = np.full(self.num_classes, np.nan)
        present = self.union > 0
        out[present] = self.intersection[present] / self.union[present]
        return out

    def mean(self, class_subset: Optional[Sequence[int]] = None) -> float:
        values = self.iou()
        if class_subset is not None:
            values = values[list(class_subset)]
        values = values[~np.isnan(values)]
        return float(values.mean()) if values.size else float("nan")


def miou(pred: MaskStack, gt: MaskStack,
         class_subset: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, float]:
    """Per-class IoU vector and mean for one prediction / ground-truth pair"""
    accumulator = IoUAccumulator(gt.num_classes).update_stacks(pred, gt)
    return accumulator.iou(), accumulator.mean(class_subset)
