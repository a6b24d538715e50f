"""Segmentation evaluation: thresholding, IoU / F1 (Dice), run aggregation.

Empty-mask convention: both masks empty scores 1.0, exactly one empty scores
0.0. Per-image metrics are averaged unweighted; across-run aggregation uses
the sample (n-1) standard deviation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Sigmoid-threshold logits to a boolean mask; probability exactly at the
    threshold is assigned to foreground (>= rule, so logit 0 -> True)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    cut = np.log(threshold / (1.0 - threshold))
    return np.asarray(logits) >= cut


def _as_binary(name: str, mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} mask must be binary, found values {vals[:8]}")
    return arr.astype(bool)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = _as_binary("pred", pred)
    gt = _as_binary("gt", gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def f1(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = _as_binary("pred", pred)
    gt = _as_binary("gt", gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


@dataclass
class SegMetrics:
    """Per-image IoU/F1 lists with unweighted means."""
    per_image_iou: list = field(default_factory=list)
    per_image_f1: list = field(default_factory=list)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.per_image_iou.append(iou(pred, gt))
        self.per_image_f1.append(f1(pred, gt))

    @property
    def iou(self) -> float:
        return float(np.mean(self.per_image_iou)) if self.per_image_iou else 0.0

    @property
    def f1(self) -> float:
        return float(np.mean(self.per_image_f1)) if self.per_image_f1 else 0.0

    def report_lines(self) -> list:
        return [f"iou = {self.iou!r}", f"f1 = {self.f1!r}",
                f"images = {len(self.per_image_iou)}"]


def aggregate_runs(values) -> tuple:
    """Mean and sample (n-1) standard deviation over per-run means; a single
    run yields std 0 with a warning."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no runs to aggregate")
    if vals.size == 1:
        warnings.warn("aggregating a single run: std is 0 by convention",
                      stacklevel=2)
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1))
