"""Retrieval-then-classify: shortlist classes cheaply, then run MGIMN on the shortlist."""

from __future__ import annotations

import json
import math
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import mean_pool
from .checkpoint import load_tensors, save_tensors
from .encoder import encode_batch
from .errors import ConfigError, DataError, LoadError
from .tensor import no_grad
from .text import split_words, tokenize

MODES = ("mean-vector", "bm25")


@dataclass(frozen=True)
class RtcConfig:
    retrieve_n: int = 10
    shots_k: int = 5
    k1: float = 1.2
    b: float = 0.75
    mode: str = "mean-vector"

    def __post_init__(self):
        if self.retrieve_n < 1 or self.shots_k < 1:
            raise ConfigError("retrieve_n and shots_k must be at least 1")
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ConfigError(f"invalid BM25 parameters k1={self.k1} b={self.b}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown retrieval mode {self.mode!r}; choose from {', '.join(MODES)}")


class TextEncoder:
    """Tokenizes and mean-pools texts with a model's encoder (eval mode, cached tokens)."""

    def __init__(self, model, vocab):
        self.model = model
        self.vocab = vocab
        self._seqs = {}

    def seq(self, text):
        if text not in self._seqs:
            self._seqs[text] = tokenize(text, self.vocab, self.model.enc_cfg.max_seq_len)
        return self._seqs[text]

    def pooled(self, texts):
        with no_grad():
            hidden, mask = encode_batch([self.seq(t) for t in texts], self.model.params,
                                        self.model.enc_cfg)
            return mean_pool(hidden, mask).data


@dataclass
class RetrievalIndex:
    """Per-class retrieval statistics over a fixed support set.

    ``support`` maps each class id to the instance indices its statistics were
    built from; stage two classifies against exactly those instances.
    """

    mode: str
    class_ids: list
    support: dict
    vectors: np.ndarray | None = None
    term_freqs: list = field(default_factory=list)
    doc_lengths: list = field(default_factory=list)
    doc_freqs: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_ids)

    @property
    def avg_doc_length(self):
        return float(np.mean(self.doc_lengths)) if self.doc_lengths else 0.0

    def idf(self, term):
        n, df = self.num_classes, self.doc_freqs.get(term, 0)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def save(self, path):
        """Write a JSON manifest at ``path``; class vectors go to a sibling ``.bin`` file."""
        path = Path(path)
        manifest = {"mode": self.mode, "class_ids": self.class_ids,
                    "support": {str(c): idx for c, idx in self.support.items()}}
        if self.mode == "bm25":
            manifest.update(term_freqs=self.term_freqs, doc_lengths=self.doc_lengths,
                            doc_freqs=self.doc_freqs)
        else:
            manifest["vectors"] = path.with_suffix(".bin").name
            save_tensors(path.with_suffix(".bin"), {"class_vectors": self.vectors},
                         {"mode": self.mode})
        path.write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read index manifest {path}: {exc}") from exc
        support = {int(c): idx for c, idx in manifest["support"].items()}
        if manifest["mode"] == "bm25":
            return cls("bm25", manifest["class_ids"], support, term_freqs=manifest["term_freqs"],
                       doc_lengths=manifest["doc_lengths"], doc_freqs=manifest["doc_freqs"])
        tensors, _ = load_tensors(path.parent / manifest["vectors"])
        return cls(manifest["mode"], manifest["class_ids"], support, vectors=tensors["class_vectors"])


def episode_support(episode):
    """Class id -> support instance indices for an Episode."""
    return {c: list(row) for c, row in zip(episode.class_map, episode.support)}


def build_index(dataset, support, cfg, encoder=None):
    """Index each class from its support instances.

    Mean-vector mode pools every support encoding and averages per class
    (vectors are rounded to float32 so a saved index behaves identically).
    BM25 mode treats the concatenated support texts of a class as one document.
    """
    class_ids = sorted(support)
    for c in class_ids:
        if not support[c]:
            raise DataError(f"class {c} has no support instances to index")
    support = {c: list(support[c]) for c in class_ids}
    if cfg.mode == "bm25":
        tfs, lengths, dfs = [], [], Counter()
        for c in class_ids:
            words = [w for i in support[c] for w in split_words(dataset.texts[i])]
            tf = Counter(words)
            tfs.append(dict(sorted(tf.items())))
            lengths.append(len(words))
            dfs.update(tf.keys())
        return RetrievalIndex("bm25", class_ids, support, term_freqs=tfs, doc_lengths=lengths,
                              doc_freqs=dict(sorted(dfs.items())))
    if encoder is None:
        raise ConfigError("mean-vector retrieval needs an encoder")
    vectors = np.stack([encoder.pooled([dataset.texts[i] for i in support[c]]).mean(axis=0)
                        for c in class_ids])
    vectors = vectors.astype(np.float32).astype(np.float64)
    return RetrievalIndex(cfg.mode, class_ids, support, vectors=vectors)


def bm25_scores(query_text, index, cfg):
    """Okapi BM25 of the query's words (repeats counted) against every class document."""
    avgdl = index.avg_doc_length or 1.0
    scores = np.zeros(index.num_classes)
    for term in split_words(query_text):
        if term not in index.doc_freqs:
            continue
        idf = index.idf(term)
        for j, tf in enumerate(index.term_freqs):
            f = tf.get(term, 0)
            if f:
                norm = cfg.k1 * (1.0 - cfg.b + cfg.b * index.doc_lengths[j] / avgdl)
                scores[j] += idf * f * (cfg.k1 + 1.0) / (f + norm)
    return scores


def cosine_scores(query_text, index, encoder):
    q = encoder.pooled([query_text])[0]
    qn = np.linalg.norm(q)
    vn = np.linalg.norm(index.vectors, axis=1)
    dots = index.vectors @ q
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where((vn > 0) & (qn > 0), dots / (vn * qn), 0.0)
    return sims


def retrieve(query_text, index, cfg, encoder=None):
    """Top ``retrieve_n`` class ids by score; equal scores rank by ascending class id."""
    n = cfg.retrieve_n
    if n > index.num_classes:
        warnings.warn(f"retrieve_n={n} exceeds {index.num_classes} classes; clamping",
                      RuntimeWarning, stacklevel=2)
        n = index.num_classes
    if index.mode == "bm25":
        scores = bm25_scores(query_text, index, cfg)
    else:
        if encoder is None:
            raise ConfigError("mean-vector retrieval needs an encoder")
        scores = cosine_scores(query_text, index, encoder)
    ids = np.asarray(index.class_ids)
    order = np.lexsort((ids, -scores))
    return [int(c) for c in ids[order[:n]]]


class Stage2:
    """MGIMN over subsets of one index's classes.

    Classes are always taken in ascending id order, so passing every indexed
    class is exactly full C-way classification.  Prepared support contexts
    are deterministic, so memoizing them (the full set plus the most recent
    shortlist) never changes a prediction.
    """

    def __init__(self, model, encoder, dataset, index):
        self.model = model
        self.encoder = encoder
        self.dataset = dataset
        self.index = index
        self._full = None
        self._last = (None, None)

    def prepare(self, classes):
        supports = [[self.encoder.seq(self.dataset.texts[i]) for i in self.index.support[c]]
                    for c in classes]
        return self.model.prepare_support(supports)

    def _prepared(self, key):
        if key == tuple(self.index.class_ids):
            if self._full is None:
                self._full = self.prepare(key)
            return self._full
        if self._last[0] != key:
            self._last = (key, self.prepare(key))
        return self._last[1]

    def classify(self, query_text, classes, cached=True):
        key = tuple(sorted(classes))
        if len(key) == 1:
            return key[0]
        prepared = self._prepared(key) if cached else self.prepare(key)
        logits = self.model.query_logits(prepared, [self.encoder.seq(query_text)])
        return key[int(np.argmax(logits.data[0]))]


def classify_among(query_text, classes, dataset, index, model, encoder):
    """Run MGIMN on a ``len(classes)``-way episode built from the index's supports."""
    return Stage2(model, encoder, dataset, index).classify(query_text, classes)


def full_classify(query_text, dataset, index, model, encoder):
    return classify_among(query_text, index.class_ids, dataset, index, model, encoder)


def rtc_classify(query_text, dataset, index, model, cfg, encoder):
    """Stage one shortlists ``retrieve_n`` classes, stage two picks among them."""
    shortlist = retrieve(query_text, index, cfg, encoder)
    return classify_among(query_text, shortlist, dataset, index, model, encoder)


def ms_per_query(times, warmup=10, count=100):
    """Mean of ``times`` (seconds) after dropping warm-up calls, in milliseconds."""
    timed = times[warmup:warmup + count] or times
    if not timed:
        return float("nan")
    return 1000.0 * float(np.mean(timed))


@dataclass
class RtcReport:
    accuracy: float
    full_accuracy: float
    recall: float
    ms_rtc: float
    ms_full: float
    agree_full: bool
    queries: int

    @property
    def speedup(self):
        return self.ms_full / self.ms_rtc


def evaluate_rtc(model, vocab, dataset, episodes, cfg, warmup=10, count=100):
    """Score RTC and full C-way classification on the same GFSL episodes.

    Each episode's support set builds its own index.  For the first
    ``warmup + count`` queries both stage two and full classification are
    also timed cold (support preparation included, no memoized state); the
    reported ms/query averages the ``count`` queries after the warm-up.
    """
    encoder = TextEncoder(model, vocab)
    hits = correct = correct_full = total = 0
    agree = True
    t_rtc, t_full = [], []
    for ep in episodes:
        index = build_index(dataset, episode_support(ep), cfg, encoder)
        stage2 = Stage2(model, encoder, dataset, index)
        for qi, local in zip(ep.query, ep.labels):
            text, gold = dataset.texts[qi], ep.class_map[local]
            shortlist = retrieve(text, index, cfg, encoder)
            hits += gold in shortlist
            pred = stage2.classify(text, shortlist)
            full = stage2.classify(text, index.class_ids)
            if total < warmup + count:
                start = time.perf_counter()
                stage2.classify(text, shortlist, cached=False)
                t_rtc.append(time.perf_counter() - start)
                start = time.perf_counter()
                stage2.classify(text, index.class_ids, cached=False)
                t_full.append(time.perf_counter() - start)
            correct += pred == gold
            correct_full += full == gold
            if len(shortlist) == index.num_classes:
                agree &= pred == full
            total += 1
    if total == 0:
        raise DataError("no queries to evaluate")
    return RtcReport(correct / total, correct_full / total, hits / total,
                     ms_per_query(t_rtc, warmup, count), ms_per_query(t_full, warmup, count),
                     bool(agree), total)
