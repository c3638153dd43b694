"""Datasets, class splits, episode samplers and the synthetic corpus generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError, SamplingError


@dataclass
class Dataset:
    texts: list
    labels: list
    class_names: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.texts) != len(self.labels):
            raise DataError("texts and labels differ in length")
        self.classes = {c: [] for c in range(len(self.class_names))}
        for i, y in enumerate(self.labels):
            if y not in self.classes:
                raise DataError(f"label id {y} outside 0..{len(self.class_names) - 1}")
            self.classes[y].append(i)

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.texts)

    def check_min_size(self, minimum):
        small = {self.class_names[c]: len(idx) for c, idx in self.classes.items() if len(idx) < minimum}
        if small:
            listing = ", ".join(f"{name} ({n})" for name, n in sorted(small.items()))
            raise DataError(f"classes with fewer than {minimum} instances: {listing}")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for text, y in zip(self.texts, self.labels):
                fh.write(json.dumps({"text": text, "label": self.class_names[y]}) + "\n")


def load_dataset(path, min_per_class=6):
    """Read JSON-lines ``{"text": ..., "label": ...}``; label ids follow first appearance."""
    texts, labels, names, index = [], [], [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(row, dict) or not isinstance(row.get("text"), str) \
                    or not isinstance(row.get("label"), str):
                raise ParseError('expected an object with string fields "text" and "label"', lineno)
            label = row["label"]
            if label not in index:
                index[label] = len(names)
                names.append(label)
            texts.append(row["text"])
            labels.append(index[label])
    if not texts:
        raise DataError(f"{path}: no instances")
    ds = Dataset(texts, labels, names)
    ds.check_min_size(min_per_class)
    return ds


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 5

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ConfigError(f"invalid episode shape N={self.n_way} K={self.k_shot} R={self.n_query}")


@dataclass
class Episode:
    """Instance indices of one meta-task; labels are episode-local class positions."""

    support: list  # N lists of K instance indices
    query: list
    labels: list
    class_map: list  # episode position -> dataset class id

    @property
    def n_way(self):
        return len(self.support)

    @property
    def k_shot(self):
        return len(self.support[0])

    def support_indices(self):
        return [i for row in self.support for i in row]


@dataclass
class ClassSplit:
    train: list
    val: list
    test: list
    gfsl: bool = False

    @property
    def seen(self):
        return list(self.train)

    @property
    def unseen(self):
        return sorted(self.val + self.test)

    def manifest(self, dataset):
        names = dataset.class_names
        out = {part: [names[c] for c in getattr(self, part)] for part in ("train", "val", "test")}
        if self.gfsl:
            out["seen"] = [names[c] for c in self.seen]
            out["unseen"] = [names[c] for c in self.unseen]
        return out


def split_classes(num_classes, seed, gfsl=False):
    """Shuffle classes by seed and cut them 1:1:1.

    A remainder of one goes to train; a remainder of two goes to train and
    test, giving 17/16/17 for 50 classes and 14/13/14 for 41.
    """
    if hasattr(num_classes, "num_classes"):
        num_classes = num_classes.num_classes
    if num_classes < 3:
        raise ConfigError(f"need at least 3 classes to split, got {num_classes}")
    order = np.random.default_rng(seed).permutation(num_classes).tolist()
    base, rem = divmod(num_classes, 3)
    n_train = base + (rem >= 1)
    n_test = base + (rem >= 2)
    n_val = num_classes - n_train - n_test
    train = sorted(order[:n_train])
    val = sorted(order[n_train:n_train + n_val])
    test = sorted(order[n_train + n_val:])
    return ClassSplit(train, val, test, gfsl=gfsl)


def _draw(dataset, classes, k_shot, n_query, rng):
    support, pool, pool_labels = [], [], []
    for pos, c in enumerate(classes):
        members = dataset.classes[c]
        if len(members) < k_shot + 1:
            raise SamplingError(f"class {dataset.class_names[c]!r} has {len(members)} instances, "
                                f"needs at least {k_shot + 1}")
        perm = rng.permutation(len(members))
        support.append([members[j] for j in perm[:k_shot]])
        rest = [members[j] for j in perm[k_shot:]]
        pool.extend(rest)
        pool_labels.extend([pos] * len(rest))
    if n_query > len(pool):
        raise SamplingError(f"only {len(pool)} query candidates for {n_query} queries")
    pick = rng.choice(len(pool), size=n_query, replace=False)
    return Episode(support, [pool[j] for j in pick], [pool_labels[j] for j in pick], list(classes))


def sample_episode(dataset, allowed_classes, spec, rng):
    """N classes without replacement, K supports each, R queries jointly from the rest."""
    allowed = sorted(allowed_classes)
    if len(allowed) < spec.n_way:
        raise SamplingError(f"{len(allowed)} classes available for a {spec.n_way}-way episode")
    classes = [allowed[j] for j in rng.choice(len(allowed), size=spec.n_way, replace=False)]
    return _draw(dataset, classes, spec.k_shot, spec.n_query, rng)


def sample_gfsl_episode(dataset, split, k_shot, n_query, rng):
    """C-way episode over every class, seen and unseen, in ascending class order."""
    classes = sorted(set(split.train) | set(split.val) | set(split.test))
    if len(classes) < 2:
        raise SamplingError("generalized episode needs at least 2 classes")
    return _draw(dataset, classes, k_shot, n_query, rng)


# -- synthetic data -------------------------------------------------------


def _lengths(length):
    if isinstance(length, int):
        return length, length
    lo, hi = length
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid length range {length}")
    return int(lo), int(hi)


def distractor_fraction(noise, length):
    """Expected share of token positions that are distractors."""
    lo, hi = _lengths(length)
    ls = np.arange(lo, hi + 1)
    return float(np.mean([round(noise * n) for n in ls]) / ls.mean())


def expected_cross_class_overlap(noise, length, n_distractors):
    """Probability that random token occurrences from two different classes coincide."""
    if n_distractors == 0:
        return 0.0
    return distractor_fraction(noise, length) ** 2 / n_distractors


def gen_synth(classes, per_class, vocab_size, noise, seed, signature_size=3, length=(8, 12)):
    """Synthetic corpus where each class owns a disjoint signature token set.

    Each instance has a uniformly drawn length; ``round(noise * length)``
    random positions hold distractor tokens shared by all classes and the
    rest hold tokens drawn from the class signature.
    """
    if classes < 1 or per_class < 1 or signature_size < 1:
        raise ConfigError("classes, per_class and signature_size must be positive")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError(f"noise must be in [0, 1], got {noise}")
    n_sig = classes * signature_size
    if vocab_size < n_sig:
        raise ConfigError(f"vocab_size {vocab_size} < classes * signature_size = {n_sig}")
    n_distract = vocab_size - n_sig
    lo, hi = _lengths(length)
    if noise > 0 and n_distract == 0 and round(noise * hi) > 0:
        raise ConfigError("noise > 0 needs vocab_size larger than classes * signature_size")

    rng = np.random.default_rng(seed)
    words = [f"w{i:04d}" for i in rng.permutation(vocab_size)]
    signatures = [words[c * signature_size:(c + 1) * signature_size] for c in range(classes)]
    distractors = words[n_sig:]
    texts, labels = [], []
    for c in range(classes):
        for _ in range(per_class):
            n = int(rng.integers(lo, hi + 1))
            n_noise = int(round(noise * n))
            noisy = set(rng.choice(n, size=n_noise, replace=False).tolist())
            toks = [distractors[rng.integers(n_distract)] if j in noisy
                    else signatures[c][rng.integers(signature_size)] for j in range(n)]
            texts.append(" ".join(toks))
            labels.append(c)
    names = [f"class_{c:03d}" for c in range(classes)]
    meta = {"signatures": signatures, "distractors": distractors, "noise": noise, "length": [lo, hi]}
    return Dataset(texts, labels, names, meta)
