"""Cross-entropy, soft dice and their weighted hybrid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, result

LOG_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and non-negative, got {self}")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("loss weights cannot both be zero")


def _check(probs: Tensor, onehot: Tensor) -> None:
    if probs.shape != onehot.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {onehot.shape} differ")
    if probs.ndim != 4:
        raise ShapeError(f"expected (n, c, h, w) tensors, got {probs.shape}")


def cross_entropy_loss(probs: Tensor, onehot: Tensor) -> Tensor:
    """Mean over pixels of ``-sum_c y_c * log(p_c + 1e-7)``."""
    _check(probs, onehot)
    n, _, h, w = probs.shape
    pixels = n * h * w
    y = onehot.data
    shifted = probs.data + probs.dtype.type(LOG_EPS)
    value = -(y * np.log(shifted)).sum() / pixels

    def backward(g):
        return (-g * y / shifted / pixels, None)

    return result(np.asarray(value, dtype=probs.dtype), (probs, onehot), backward)


def dice_loss(probs: Tensor, onehot: Tensor) -> Tensor:
    """Class-averaged soft Sorensen dice loss with additive smoothing 1.0."""
    _check(probs, onehot)
    p, y = probs.data, onehot.data
    axes = (0, 2, 3)
    s = probs.dtype.type(DICE_SMOOTH)
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes) + s
    numer = 2 * inter + s
    n_cls = p.shape[1]
    value = (1 - numer / denom).mean()

    def backward(g):
        num = numer[None, :, None, None]
        den = denom[None, :, None, None]
        grad = -(2 * y * den - num) / den**2 / n_cls
        return (g * grad, None)

    return result(np.asarray(value, dtype=probs.dtype), (probs, onehot), backward)


def hybrid_loss(probs: Tensor, onehot: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """``lambda1 * cross_entropy + lambda2 * dice``."""
    ce = cross_entropy_loss(probs, onehot)
    dl = dice_loss(probs, onehot)
    return ops.weighted_sum([(weights.lambda1, ce), (weights.lambda2, dl)])
