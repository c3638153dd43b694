import numpy as np
import pytest
from hypothesis import settings

from mgimn.episodes import gen_synth
from mgimn.matching import AblationFlags
from mgimn.model import FewShotModel, ModelConfig
from mgimn.text import build_vocab, tokenize

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


def numeric_grad(f, x, h=1e-3):
    """Five-point central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    Fourth-order accurate, so a large step keeps round-off small without
    truncation error swamping tiny derivatives.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * h
            vals.append(f())
        flat[i] = orig
        gflat[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    ds = gen_synth(6, 10, 60, 0.3, seed=3, signature_size=3, length=(3, 6))
    vocab = build_vocab(ds.texts)
    seqs = [tokenize(t, vocab, 16) for t in ds.texts]
    return ds, vocab, seqs


def tiny_model(vocab_size, kind="mgimn", hidden=8, seed=0, flags=None, layers=1):
    cfg = ModelConfig(kind=kind, hidden=hidden, layers=layers, heads=2, max_seq_len=16, dropout=0.0,
                      flags=flags or AblationFlags())
    return FewShotModel(cfg, vocab_size, seed=seed)


def random_episode(seqs, labels, n_way, k_shot, n_query, rng):
    """Token-level episode straight from a label list (support rows, queries, query labels)."""
    labels = np.asarray(labels)
    classes = rng.choice(np.unique(labels), size=n_way, replace=False)
    support, query, qlab = [], [], []
    for pos, c in enumerate(classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        support.append([seqs[i] for i in members[:k_shot]])
        query.append(seqs[members[k_shot]])
        qlab.append(pos)
    order = rng.permutation(n_way)[:n_query]
    return support, [query[i] for i in order], [qlab[i] for i in order]


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE = {}


@pytest.fixture
def verdict():
    def record(number, passed, detail):
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
