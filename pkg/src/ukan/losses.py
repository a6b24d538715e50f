"""Training losses shared by the trainer and the test oracles.

The default segmentation loss is a weighted combination of binary
cross-entropy on logits and Dice loss (smooth term 1, computed over the whole
flattened batch); a pure pixel-wise cross-entropy mode serves multi-class
heads. The diffusion objective is plain MSE against the injected noise.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Numerically stable mean binary cross-entropy,
    mean(max(z,0) - z*y + log(1 + exp(-|z|)))."""
    z, y = logits, target
    return (z.relu() - z * y + ((-z.abs()).exp() + 1.0).log()).mean()


def dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - Dice overlap of sigmoid probabilities vs a binary mask, with all
    sums taken over the flattened batch."""
    p = logits.sigmoid()
    inter = (p * target).sum()
    total = p.sum() + target.sum()
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def _require_binary(mask: Tensor) -> None:
    vals = np.unique(mask.data)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValueError(f"mask must be binary, found values {vals[:8]}")


def seg_loss(logits: Tensor, mask: Tensor, bce_weight: float = 0.5,
             dice_weight: float = 1.0, mode: str = "bce_dice") -> Tensor:
    """Segmentation objective.

    mode 'bce_dice' (default, binary head): bce_weight*BCE + dice_weight*Dice.
    mode 'ce' (multi-class head): pixel-wise softmax cross-entropy, with the
    mask carrying integer class ids.
    """
    if mode == "ce":
        return softmax_cross_entropy(logits, mask)
    if mode != "bce_dice":
        raise ValueError(f"unknown loss mode {mode!r}")
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
    _require_binary(mask)
    return (bce_weight * bce_with_logits(logits, mask)
            + dice_weight * dice_loss(logits, mask))


def softmax_cross_entropy(logits: Tensor, classes: Tensor) -> Tensor:
    """Mean pixel-wise cross-entropy; logits (B,C,H,W), classes (B,1,H,W)
    holding integer ids in [0, C)."""
    b, c, h, w = logits.shape
    ids = classes.data.astype(np.int64).reshape(b, 1, h, w)
    if ids.min() < 0 or ids.max() >= c:
        raise ValueError(f"class ids outside [0, {c})")
    # subtracting a detached max leaves the softmax gradient exact
    zmax = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - zmax
    logsum = shifted.exp().sum(axis=1, keepdims=True).log()
    log_probs = shifted - logsum
    onehot = np.zeros((b, c, h, w), dtype=logits.dtype)
    np.put_along_axis(onehot, ids, 1.0, axis=1)
    return -(log_probs * Tensor(onehot)).sum(axis=1).mean()


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    return ((pred - target) ** 2.0).mean()
