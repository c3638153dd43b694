"""Vocabulary construction and tokenization."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

from .errors import DataError

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text):
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map with PAD=0, UNK=1, CLS=2 reserved."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token):
        return self.stoi.get(token, UNK)

    def as_dict(self):
        return dict(self.stoi)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def build_vocab(corpus, min_count=1):
    """Ids ordered by descending frequency, then lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(split_words(text))
    kept = [tok for tok, n in counts.items() if n >= min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids starting with CLS; ``length`` counts CLS and excludes padding."""

    ids: tuple
    degenerate: bool = False

    @property
    def length(self):
        return len(self.ids)

    def padded(self, size):
        return self.ids + (PAD,) * (size - len(self.ids))


def tokenize(text, vocab, max_seq_len=32):
    words = split_words(text)[: max_seq_len - 1]
    if not words:
        return TokenSeq((CLS, UNK), degenerate=True)
    return TokenSeq((CLS,) + tuple(vocab.lookup(w) for w in words))
