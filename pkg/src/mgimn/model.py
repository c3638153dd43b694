"""Few-shot classifiers over a shared encoder: MGIMN and the two baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import _pooled, matching_logits, mean_pool, proto_logits
from .encoder import EncoderConfig, encode, encode_batch, init_encoder
from .errors import ConfigError
from .matching import (AblationFlags, Matcher, episode_match_vectors, fuse, init_matching,
                       instance_match, multi_grained_align, query_match_vectors, support_context)
from .optim import ParamSet
from .prediction import class_aggregate, episode_loss, init_prediction, predict
from .tensor import concat, no_grad, softmax

KINDS = ("mgimn", "proto", "matching")


@dataclass
class ModelConfig:
    kind: str = "mgimn"
    hidden: int = 128
    layers: int = 2
    heads: int = 2
    max_seq_len: int = 32
    dropout: float = 0.1
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)

    def encoder_config(self, vocab_size):
        return EncoderConfig(vocab_size=vocab_size, layers=self.layers, hidden=self.hidden,
                             heads=self.heads, max_seq_len=self.max_seq_len, dropout=self.dropout)

    def to_dict(self):
        return asdict(self)


@dataclass
class PreparedSupport:
    """Eval-mode support state reusable across queries of one episode."""

    n_way: int
    k_shot: int
    state: object  # SupportContext (MGIMN) or pooled (N, K, D) Tensor (baselines)


class FewShotModel:
    """Parameters plus forward passes for one model kind."""

    def __init__(self, cfg, vocab_size, seed=0, params=None):
        self.cfg = cfg
        self.enc_cfg = cfg.encoder_config(vocab_size)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamSet()
            init_encoder(params, self.enc_cfg, rng)
            if cfg.kind == "mgimn":
                init_matching(params, cfg.hidden, cfg.flags, rng)
                init_prediction(params, cfg.hidden, rng)
        self.params = params

    @property
    def kind(self):
        return self.cfg.kind

    def matcher(self, training=False, rng=None, trace=None):
        return Matcher(self.params, self.cfg.flags, self.cfg.dropout, training, rng, trace=trace)

    def logits(self, support_seqs, query_seqs, training=False, rng=None, trace=None):
        """Class logits ``(R, N)`` for an episode given as TokenSeqs."""
        n_way, k_shot = len(support_seqs), len(support_seqs[0])
        if self.kind != "mgimn":
            q, s = _pooled(support_seqs, query_seqs, self.params, self.enc_cfg, training, rng)
            head = proto_logits if self.kind == "proto" else matching_logits
            return head(q, s)
        r = len(query_seqs)
        flat = [s for row in support_seqs for s in row]
        hidden, mask = encode_batch(list(query_seqs) + flat, self.params, self.enc_cfg, training, rng)
        lq = max(s.length for s in query_seqs) - 1
        ls = max(s.length for s in flat) - 1
        hq, mq = hidden[:r, :lq], mask[:r, :lq]
        hs, ms = hidden[r:, :ls], mask[r:, :ls]
        matcher = self.matcher(training, rng, trace)
        vectors = episode_match_vectors(hq, mq, hs, ms, n_way, k_shot, matcher)
        vectors = vectors.reshape(r, n_way, k_shot, self.cfg.hidden)
        return predict(class_aggregate(vectors), self.params, self.cfg.dropout, training, rng).logits

    def _encode_trimmed(self, seqs):
        hidden, mask = encode_batch(list(seqs), self.params, self.enc_cfg)
        width = max(s.length for s in seqs) - 1
        return hidden[:, :width], mask[:, :width]

    def prepare_support(self, support_seqs):
        """Encode a support set once (eval mode) for repeated ``query_logits`` calls."""
        n_way, k_shot = len(support_seqs), len(support_seqs[0])
        flat = [s for row in support_seqs for s in row]
        with no_grad():
            hs, ms = self._encode_trimmed(flat)
            if self.kind == "mgimn":
                state = support_context(hs, ms, n_way, k_shot, self.matcher())
            else:
                state = mean_pool(hs, ms).reshape(n_way, k_shot, self.cfg.hidden)
        return PreparedSupport(n_way, k_shot, state)

    def query_logits(self, prepared, query_seqs):
        """Eval-mode logits ``(R, N)`` of queries against a prepared support set."""
        with no_grad():
            hq, mq = self._encode_trimmed(query_seqs)
            if self.kind != "mgimn":
                head = proto_logits if self.kind == "proto" else matching_logits
                return head(mean_pool(hq, mq), prepared.state)
            vectors = query_match_vectors(hq, mq, prepared.state, self.matcher())
            vectors = vectors.reshape(len(query_seqs), prepared.n_way, prepared.k_shot,
                                      self.cfg.hidden)
            return predict(class_aggregate(vectors), self.params).logits

    def reference_logits(self, support_seqs, query_seqs, trace=None):
        """Unbatched eval-mode MGIMN forward, one query and one support pair at a time."""
        if self.kind != "mgimn":
            raise ConfigError("reference_logits is only defined for MGIMN")
        matcher = self.matcher(trace=trace)
        flags = self.cfg.flags
        supports = [[encode(s, self.params, self.enc_cfg).hidden for s in row] for row in support_seqs]
        rows = []
        for qseq in query_seqs:
            q = encode(qseq, self.params, self.enc_cfg).hidden
            views = multi_grained_align(q, supports, flags, matcher)
            class_vecs = []
            for n, row in enumerate(supports):
                matches = [instance_match(*fuse(q, s, views[(n, k)], flags, matcher), matcher)
                           for k, s in enumerate(row)]
                class_vecs.append(class_aggregate(matches))
            rows.append(predict(concat(class_vecs, axis=0), self.params).logits.reshape(1, -1))
        return concat(rows, axis=0)

    def loss(self, support_seqs, query_seqs, labels, training=True, rng=None):
        return episode_loss(self.logits(support_seqs, query_seqs, training, rng), labels)

    def probabilities(self, support_seqs, query_seqs):
        with no_grad():
            return softmax(self.logits(support_seqs, query_seqs), axis=-1).data

    def predict(self, support_seqs, query_seqs):
        with no_grad():
            return np.argmax(self.logits(support_seqs, query_seqs).data, axis=-1)
