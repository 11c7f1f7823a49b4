"""Overlap metric and the training loss (cross-entropy + soft Dice).

Both the hard metric and the soft loss score foreground classes only and
treat an empty-in-both class as a perfect 1.0, so the soft loss approaches
1 - hard Dice as the logits saturate toward one-hot.
"""

from __future__ import annotations

import numpy as np

from .config import LossConfig
from .engine import ShapeError, Tensor, exp, log, narrow, sum_


def dice_metric(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-foreground-class Dice 2|P∩G| / (|P|+|G|) and their mean."""
    if pred.shape != gt.shape:
        raise ShapeError(f"dice_metric: shapes {pred.shape} vs {gt.shape}")
    scores = np.zeros(num_classes - 1, dtype=np.float64)
    for c in range(1, num_classes):
        p = pred == c
        g = gt == c
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            scores[c - 1] = 1.0  # absent from both: perfect agreement
        else:
            scores[c - 1] = 2.0 * int((p & g).sum()) / denom
    return scores, float(scores.mean())


def dice_ce_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of voxel cross-entropy and soft Dice over foreground.

    ``logits`` is (C, H, W, D) pre-softmax; ``labels`` an integer volume.
    """
    if cfg is None:
        cfg = LossConfig()
    num_classes = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"loss: labels {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]"
        )
    n_vox = labels.size
    onehot_np = np.zeros(logits.shape, dtype=logits.data.dtype)
    flat = onehot_np.reshape(num_classes, -1)
    flat[labels.reshape(-1), np.arange(n_vox)] = 1.0
    onehot = Tensor(onehot_np)

    # log-softmax over the class axis, max-shifted for stability
    shift = Tensor(np.max(logits.data, axis=0, keepdims=True), dtype=logits.data.dtype)
    shifted = logits - shift
    logp = shifted - log(sum_(exp(shifted), axis=0, keepdims=True))

    ce = -(sum_(logp * onehot) / float(n_vox))

    probs = exp(logp)
    inter = sum_(probs * onehot, axis=(1, 2, 3))
    psum = sum_(probs, axis=(1, 2, 3))
    gsum = Tensor(onehot_np.sum(axis=(1, 2, 3)), dtype=logits.data.dtype)
    eps = cfg.smooth
    per_class = ((inter * 2.0) + eps) / (psum + gsum + eps)
    soft_dice_fg = narrow(per_class, 0, 1, num_classes - 1).mean()
    dice_loss = 1.0 - soft_dice_fg

    return ce * cfg.ce_weight + dice_loss * cfg.dice_weight
