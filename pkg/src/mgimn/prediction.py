"""Class-wise aggregation, per-class scoring and the episode loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .functional import dropout, glorot, linear
from .tensor import Tensor, concat, log_softmax, softmax


def init_prediction(params, d, rng, prefix="pred."):
    params.add(prefix + "l1.weight", glorot(rng, 2 * d, d))
    params.add(prefix + "l1.bias", np.zeros(d))
    params.add(prefix + "l2.weight", glorot(rng, d, 1))
    params.add(prefix + "l2.bias", np.zeros(1))


@dataclass
class EpisodeLogits:
    logits: Tensor  # (..., N)

    @property
    def probabilities(self):
        return softmax(self.logits, axis=-1)


def class_aggregate(matches):
    """``[max_k m_k ; mean_k m_k]``.

    Accepts a list of K ``1 x D`` vectors (returns ``1 x 2D``) or a tensor
    ``(..., K, D)`` (returns ``(..., 2D)``).
    """
    if isinstance(matches, Tensor):
        if matches.shape[-2] == 0:
            raise DataError("class_aggregate needs at least one matching vector")
        return concat([matches.max(axis=-2), matches.mean(axis=-2)], axis=-1)
    matches = list(matches)
    if not matches:
        raise DataError("class_aggregate needs at least one matching vector")
    stacked = concat(matches, axis=0)
    return concat([stacked.max(axis=0, keepdims=True), stacked.mean(axis=0, keepdims=True)], axis=-1)


def predict(class_vectors, params, dropout_rate=0.0, training=False, rng=None, prefix="pred."):
    """Score each class vector with a shared two-layer MLP.

    ``class_vectors`` is ``(..., N, 2D)`` or a list of N ``1 x 2D`` tensors.
    """
    if not isinstance(class_vectors, Tensor):
        class_vectors = concat(list(class_vectors), axis=0)
    if class_vectors.shape[-2] < 2:
        raise ConfigError(f"prediction needs at least 2 classes, got {class_vectors.shape[-2]}")
    x = dropout(class_vectors, dropout_rate, training, rng)
    x = linear(x, params[prefix + "l1.weight"], params[prefix + "l1.bias"], "relu")
    x = dropout(x, dropout_rate, training, rng)
    x = linear(x, params[prefix + "l2.weight"], params[prefix + "l2.bias"], None)
    return EpisodeLogits(x.reshape(x.shape[:-1]))


def episode_loss(logits, labels):
    """Mean negative log-probability of the true class over the queries.

    ``logits`` is an ``(R, N)`` tensor or a list of EpisodeLogits.
    """
    if not isinstance(logits, Tensor):
        items = [e.logits if isinstance(e, EpisodeLogits) else e for e in logits]
        logits = concat([t.reshape(1, -1) for t in items], axis=0)
    labels = np.asarray(labels, dtype=np.int64)
    r, n = logits.shape
    if labels.shape != (r,):
        raise DataError(f"expected {r} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise DataError(f"label out of range [0, {n})")
    logp = log_softmax(logits, axis=-1)
    return -logp[np.arange(r), labels].mean()
