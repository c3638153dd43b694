"""BERT-shaped transformer encoder trained from random initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .functional import dropout, glorot
from .tensor import Tensor, affine, embedding, gelu, layer_norm, softmax
from .text import PAD


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 128
    heads: int = 2
    max_seq_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "layers", "hidden", "heads", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder {name} must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class EncodedSeq:
    hidden: Tensor  # l x D, CLS row removed

    @property
    def length(self):
        return self.hidden.shape[0]


def init_encoder(params, cfg, rng, prefix="enc."):
    d = cfg.hidden
    # unit-variance token embeddings: tokens of unseen classes are never updated,
    # so they must start on the same footing as the trained ones
    params.add(prefix + "tok_emb", rng.standard_normal((cfg.vocab_size, d)))
    params.add(prefix + "pos_emb", glorot(rng, cfg.max_seq_len, d))
    params.add(prefix + "emb_ln.gamma", np.ones(d))
    params.add(prefix + "emb_ln.beta", np.zeros(d))
    for i in range(cfg.layers):
        p = f"{prefix}l{i}."
        for name in ("q", "k", "v", "o"):
            params.add(p + f"attn.{name}.weight", glorot(rng, d, d))
            # a key bias only shifts each score row by a constant, which softmax cancels
            if name != "k":
                params.add(p + f"attn.{name}.bias", np.zeros(d))
        params.add(p + "ln1.gamma", np.ones(d))
        params.add(p + "ln1.beta", np.zeros(d))
        params.add(p + "ffn.in.weight", glorot(rng, d, 4 * d))
        params.add(p + "ffn.in.bias", np.zeros(4 * d))
        params.add(p + "ffn.out.weight", glorot(rng, 4 * d, d))
        params.add(p + "ffn.out.bias", np.zeros(d))
        params.add(p + "ln2.gamma", np.ones(d))
        params.add(p + "ln2.beta", np.zeros(d))


def _ids_matrix(seqs, cfg, pad_to=None):
    width = max(s.length for s in seqs) if pad_to is None else pad_to
    if width > cfg.max_seq_len:
        raise DataError(f"sequence length {width} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.array([s.padded(width) for s in seqs], dtype=np.int64)
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise DataError(f"token id out of range for vocabulary of size {cfg.vocab_size}")
    return ids


def encode_batch(seqs, params, cfg, training=False, rng=None, pad_to=None, attention_trace=None):
    """Encode several TokenSeqs at once.

    Returns ``(hidden, mask)`` with hidden of shape ``(B, L-1, D)`` (CLS row
    dropped) and a boolean mask of real-token positions.  Padded positions
    never receive attention.  When ``attention_trace`` is a list, every
    layer's attention weights are appended to it.
    """
    ids = _ids_matrix(seqs, cfg, pad_to)
    b, width = ids.shape
    d, h = cfg.hidden, cfg.heads
    dh = d // h
    valid = ids != PAD
    key_mask = valid[:, None, None, :]
    pre = "enc."

    x = embedding(params[pre + "tok_emb"], ids) + params[pre + "pos_emb"][:width]
    x = layer_norm(x, params[pre + "emb_ln.gamma"], params[pre + "emb_ln.beta"])
    x = dropout(x, cfg.dropout, training, rng)
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.layers):
        p = f"{pre}l{i}."

        def heads(name):
            t = affine(x, params[p + f"attn.{name}.weight"], params.get(p + f"attn.{name}.bias"))
            return t.reshape(b, width, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        att = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1, mask=key_mask)
        if attention_trace is not None:
            attention_trace.append((att.data, valid))
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, width, d)
        out = affine(ctx, params[p + "attn.o.weight"], params[p + "attn.o.bias"])
        out = dropout(out, cfg.dropout, training, rng)
        x = layer_norm(x + out, params[p + "ln1.gamma"], params[p + "ln1.beta"])
        ff = gelu(affine(x, params[p + "ffn.in.weight"], params[p + "ffn.in.bias"]))
        ff = affine(ff, params[p + "ffn.out.weight"], params[p + "ffn.out.bias"])
        ff = dropout(ff, cfg.dropout, training, rng)
        x = layer_norm(x + ff, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    return x[:, 1:, :], valid[:, 1:]


def encode(seq, params, cfg, training=False, rng=None):
    """Encode one TokenSeq into an ``(l-1) x D`` EncodedSeq."""
    hidden, _ = encode_batch([seq], params, cfg, training, rng)
    return EncodedSeq(hidden[0])
