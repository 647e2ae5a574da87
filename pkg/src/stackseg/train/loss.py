"""Hybrid cross-entropy + soft Dice segmentation loss.

Both terms are built from differentiable ops so gradients flow back
into the network. Labels may arrive at a finer resolution than the
logits (the quarter-resolution decoder variant); they are downsampled
with nearest-neighbor picking rather than upsampling the logits, which
keeps the training graph small.
"""

from __future__ import annotations

import numpy as np

from ..data.preprocess import nearest_resize_2d
from ..errors import ContractError, ShapeError
from ..tensor import Tensor, constant, ops

CE_WEIGHT = 0.2
DICE_WEIGHT = 0.8
DICE_SMOOTHING = 1e-5


def hybrid_loss(
    logits: Tensor,
    labels: np.ndarray,
    alpha: float = CE_WEIGHT,
    beta: float = DICE_WEIGHT,
    eps: float = DICE_SMOOTHING,
) -> Tensor:
    """alpha * CE + beta * (1 - mean soft Dice) over merged slices.

    logits: [M, K, h, w]; labels: integer [M, H, W] with values in [0, K).
    """
    if logits.ndim != 4:
        raise ShapeError(f"expected logits [M, K, h, w], got {logits.shape}")
    m, k, h, w = logits.shape
    lab = np.asarray(labels)
    if lab.ndim != 3 or lab.shape[0] != m:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    if lab.shape[1:] != (h, w):
        lab = nearest_resize_2d(lab, (h, w))
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ContractError(f"label values outside [0, {k})")

    x = ops.transpose(logits, (0, 2, 3, 1))  # [M, h, w, K]
    onehot = constant(np.ascontiguousarray(np.eye(k, dtype=np.float32)[lab]))

    # log-softmax; the max shift is a detached constant so it adds no graph
    shift = constant(x.data.max(axis=-1, keepdims=True))
    z = ops.sub(x, shift)
    log_norm = ops.log(ops.reduce_sum(ops.exp(z), axes=-1, keepdims=True))
    log_p = ops.sub(z, log_norm)
    ce = ops.scale(ops.reduce_sum(ops.mul(log_p, onehot)), -1.0 / (m * h * w))

    probs = ops.softmax_lastdim(x)
    inter = ops.reduce_sum(ops.mul(probs, onehot), axes=(0, 1, 2))  # [K]
    cards = ops.add(
        ops.reduce_sum(probs, axes=(0, 1, 2)), ops.reduce_sum(onehot, axes=(0, 1, 2))
    )
    smooth = constant(np.full((k,), eps, dtype=np.float32))
    dice = ops.div(ops.add(ops.scale(inter, 2.0), smooth), ops.add(cards, smooth))
    dice_loss = ops.sub(constant(1.0), ops.scale(ops.reduce_sum(dice), 1.0 / k))

    return ops.add(ops.scale(ce, alpha), ops.scale(dice_loss, beta))
