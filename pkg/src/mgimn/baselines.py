"""Prototypical Network and Matching Network heads over mean-pooled encodings."""

from __future__ import annotations

import numpy as np

from .encoder import encode_batch
from .tensor import Tensor, l2_normalize, logsumexp, softmax


def mean_pool(hidden, mask):
    """Average token states over real positions: ``(B, L, D) -> (B, D)``."""
    keep = np.asarray(mask, dtype=np.float64)
    counts = keep.sum(axis=-1, keepdims=True)
    return (hidden * Tensor(keep[..., None])).sum(axis=-2) / Tensor(counts)


def cosine_matrix(queries, supports):
    """Cosine similarity ``(R, D) x (M, D) -> (R, M)``; zero vectors score 0."""
    return l2_normalize(queries) @ l2_normalize(supports).swapaxes(-1, -2)


def matching_logits(queries, supports):
    """Class logits whose softmax is the attention-sum over support cosines.

    ``supports`` is ``(N, K, D)``.  ``logsumexp_k sim(q, s_nk)`` per class,
    so ``softmax`` over classes equals ``sum_k exp(sim) / sum_{n,k} exp(sim)``.
    """
    n, k, d = supports.shape
    sims = cosine_matrix(queries, supports.reshape(n * k, d))
    return logsumexp(sims.reshape(queries.shape[0], n, k), axis=-1)


def proto_logits(queries, supports):
    """Negative squared euclidean distance to each class mean."""
    protos = supports.mean(axis=1)
    diff = queries.reshape(queries.shape[0], 1, queries.shape[1]) - protos.reshape(1, *protos.shape)
    return -(diff * diff).sum(axis=-1)


def _pooled(support_seqs, query_seqs, params, cfg, training=False, rng=None):
    flat = [s for row in support_seqs for s in row]
    hidden, mask = encode_batch(list(query_seqs) + flat, params, cfg, training, rng)
    pooled = mean_pool(hidden, mask)
    r = len(query_seqs)
    n, k = len(support_seqs), len(support_seqs[0])
    return pooled[:r], pooled[r:].reshape(n, k, cfg.hidden)


def matching_forward(support_seqs, query_seqs, params, cfg):
    """Matching Network class probabilities ``(R, N)`` (eval mode)."""
    q, s = _pooled(support_seqs, query_seqs, params, cfg)
    return softmax(matching_logits(q, s), axis=-1)


def proto_forward(support_seqs, query_seqs, params, cfg):
    """Prototypical Network class probabilities ``(R, N)`` (eval mode)."""
    q, s = _pooled(support_seqs, query_seqs, params, cfg)
    return softmax(proto_logits(q, s), axis=-1)
