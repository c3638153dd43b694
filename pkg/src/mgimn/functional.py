"""Layer-level operations built on the tensor engine."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, affine, concat, masked_max, softmax


def softmax_rows(m):
    """Row-wise softmax of a rank-2 tensor."""
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {m.shape}")
    return softmax(m, axis=-1)


def linear(x, weight, bias=None, activation="relu"):
    """``activation(x @ weight + bias)``; ``activation=None`` gives the plain affine map."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    return affine(x, weight, bias, activation)


def pool_max_avg(m, mask=None):
    """Concatenate column-wise max and mean over the token axis.

    A rank-2 ``L x D`` input gives ``1 x 2D``.  Batched input ``(..., L, D)``
    with an optional boolean ``mask`` of shape ``(..., L)`` gives
    ``(..., 2D)``; masked tokens are ignored by both halves.
    """
    if m.ndim < 2 or m.shape[-2] == 0:
        raise ShapeError(f"pool_max_avg needs at least one row, got shape {m.shape}")
    if m.ndim == 2 and mask is None:
        return concat([m.max(axis=0, keepdims=True), m.mean(axis=0, keepdims=True)], axis=-1)
    if mask is None:
        return concat([m.max(axis=-2), m.mean(axis=-2)], axis=-1)
    mask = np.asarray(mask, dtype=bool)
    keep = mask[..., None]
    mx = masked_max(m, axis=-2, mask=keep)
    counts = mask.sum(axis=-1, keepdims=True).astype(np.float64)
    avg = (m * Tensor(keep.astype(np.float64))).sum(axis=-2) / Tensor(counts)
    return concat([mx, avg], axis=-1)


def dropout(x, rate, training, rng):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def match_features(a, b):
    """``[a; b; |a - b|; a * b]`` along the last axis (broadcasting a and b)."""
    shape = np.broadcast_shapes(a.shape, b.shape)
    a = a.broadcast_to(shape)
    b = b.broadcast_to(shape)
    diff = a - b
    return concat([a, b, diff.abs(), a * b], axis=-1)


def glorot(rng, din, dout):
    bound = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-bound, bound, size=(din, dout))
