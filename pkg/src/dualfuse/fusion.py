"""Test-time feature-fusion strategies.

Both take the two encoder outputs (same shape) and return fused features.
The channel strategy weights each channel by a two-way softmax over its
global average, computed so that the weight pair sums to exactly 1 and the
operation is bitwise symmetric in its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ChannelWeights:
    """Per-channel convex weights, shape (n, c, 1, 1), w_ir + w_vi == 1."""

    w_ir: Tensor
    w_vi: Tensor


def _check_same_shape(f_ir: Tensor, f_vi: Tensor) -> None:
    if f_ir.shape != f_vi.shape:
        raise ShapeError(f"feature shape mismatch: {f_ir.shape} vs {f_vi.shape}")


def fuse_addition(f_ir: Tensor, f_vi: Tensor) -> Tensor:
    """Elementwise sum of the two feature maps."""
    _check_same_shape(f_ir, f_vi)
    return f_ir + f_vi


def channel_weights(f_ir: Tensor, f_vi: Tensor) -> ChannelWeights:
    """Softmax over the globally averaged channel activations.

    The logistic of the mean difference is evaluated on the larger side
    (value in [0.5, 1)); the smaller side is its exact float complement,
    which keeps the pair summing to exactly 1.
    """
    _check_same_shape(f_ir, f_vi)
    u_ir = f_ir.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    u_vi = f_vi.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    d = (u_ir - u_vi).astype(f_ir.dtype)
    big = 1.0 / (1.0 + np.exp(-np.abs(d)))
    w_ir = np.where(d >= 0, big, 1.0 - big).astype(f_ir.dtype)
    return ChannelWeights(w_ir=w_ir, w_vi=(1.0 - w_ir).astype(f_ir.dtype))


def fuse_channel(f_ir: Tensor, f_vi: Tensor) -> Tensor:
    """Weight each channel by its softmaxed global average, then add."""
    w = channel_weights(f_ir, f_vi)
    return w.w_ir * f_ir + w.w_vi * f_vi
