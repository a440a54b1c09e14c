"""Scalar losses. Each returns ``(loss, grad_wrt_prediction)``."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, ShapeError
from .layers import softmax

DICE_SMOOTH = 1.0


def masked_mse(pred, target, mask):
    """Mean over masked tokens of the per-token mean squared error.

    pred/target: (..., N, P); mask: (..., N) boolean, True = masked. Visible
    tokens never enter the computation, so their predictions cannot affect the
    loss or its gradient.
    """
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ShapeError(f"masked_mse shapes: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    mask = mask.astype(bool)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("masked_mse needs at least one masked token")
    diff = pred[mask] - target[mask]
    P = pred.shape[-1]
    loss = float((diff * diff).mean(axis=-1).sum() / n)
    grad = np.zeros_like(pred)
    grad[mask] = diff * (2.0 / (n * P))
    return loss, grad


def _pixel_mask(pred, mask):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("mask selects no pixels")
    return mask, n


def masked_rmse(pred, target, mask):
    mask, n = _pixel_mask(pred, mask)
    diff = np.where(mask, pred - target, 0.0)
    rmse = float(np.sqrt((diff * diff).sum() / n))
    if rmse == 0.0:
        return 0.0, np.zeros_like(pred)
    return rmse, (diff / (n * rmse)).astype(pred.dtype)


def masked_mae(pred, target, mask):
    mask, n = _pixel_mask(pred, mask)
    diff = np.where(mask, pred - target, 0.0)
    return float(np.abs(diff).sum() / n), (np.sign(diff) / n).astype(pred.dtype)


def normalize_class_weights(weights):
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"class weights must be non-negative with positive sum: {w}")
    return w / w.mean()


def weighted_cross_entropy(logits, labels, class_weights=None, ignore_label=255):
    """Weighted mean negative log-likelihood over non-ignored pixels.

    logits (..., K), labels (...). Weights are normalised to mean 1; the loss
    is sum_i w[y_i] * nll_i / sum_i w[y_i].
    """
    K = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    w = normalize_class_weights(np.ones(K) if class_weights is None else class_weights)
    valid = labels != ignore_label
    if not valid.any():
        raise DegenerateInputError("every pixel carries the ignore label")
    y = labels[valid].astype(np.int64)
    if y.min() < 0 or y.max() >= K:
        raise ShapeError(f"labels outside [0, {K})")
    z = logits[valid]
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    wy = w[y]
    denom = wy.sum()
    nll = -logp[np.arange(y.size), y]
    loss = float((wy * nll).sum() / denom)
    g = np.exp(logp)
    g[np.arange(y.size), y] -= 1.0
    g *= (wy / denom)[:, None]
    grad = np.zeros_like(logits)
    grad[valid] = g
    return loss, grad


def dice_loss(logits, labels, ignore_label=255, smooth=DICE_SMOOTH):
    """Soft multi-class dice, averaged over classes: 1 - (2I + s) / (S_p + S_y + s)."""
    K = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    valid = labels != ignore_label
    if not valid.any():
        raise DegenerateInputError("every pixel carries the ignore label")
    z = logits[valid].astype(np.float64)
    p = softmax(z)
    y = labels[valid].astype(np.int64)
    if y.min() < 0 or y.max() >= K:
        raise ShapeError(f"labels outside [0, {K})")
    onehot = np.zeros_like(p)
    onehot[np.arange(y.size), y] = 1.0
    inter = (p * onehot).sum(axis=0)
    denom = p.sum(axis=0) + onehot.sum(axis=0) + smooth
    num = 2.0 * inter + smooth
    loss = float(np.mean(1.0 - num / denom))
    # d loss / d p_ik = -(2 y_ik * denom_k - num_k) / denom_k^2 / K
    dp = -(2.0 * onehot * denom - num) / (denom ** 2) / K
    dz = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    grad = np.zeros_like(logits)
    grad[valid] = dz.astype(logits.dtype)
    return loss, grad
