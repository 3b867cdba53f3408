"""Training losses: cross-entropy for classification, soft Dice for segmentation."""
from __future__ import annotations

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, make
from .errors import DimensionError, UsageError

DICE_EPS = 1.0


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise UsageError(f"label out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


def dice_loss(pred_probs: Tensor, target_mask, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of (2 sum p t + eps) / (sum p + sum t + eps).

    Sums run over the whole batch and all pixels; class 0 is background.
    """
    mask = np.asarray(target_mask)
    if pred_probs.ndim != 4 or mask.shape != (pred_probs.shape[0],) + pred_probs.shape[2:]:
        raise DimensionError(f"probs {pred_probs.shape} vs mask {mask.shape}")
    p = pred_probs.data
    k = p.shape[1]
    if k < 2:
        raise DimensionError("dice loss needs at least one foreground class")
    onehot = (mask[:, None] == np.arange(k)[None, :, None, None]).astype(p.dtype)
    inter = (p * onehot).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    den = psum + tsum + eps
    num = 2 * inter + eps
    fg = slice(1, k)
    loss = 1.0 - (num[fg] / den[fg]).mean()

    def bw(g):
        gp = np.zeros_like(p)
        scale = -g / (k - 1)
        for c in range(1, k):
            gp[:, c] = scale * (2 * onehot[:, c] * den[c] - num[c]) / den[c] ** 2
        return (gp,)

    return make(np.asarray(loss, dtype=p.dtype), (pred_probs,), bw, "dice_loss")


def segmentation_loss(logits: Tensor, target_mask) -> Tensor:
    return dice_loss(F.softmax(logits, axis=1), target_mask)
