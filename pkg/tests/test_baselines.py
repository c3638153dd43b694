import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_episode, tiny_model
from mgimn.baselines import cosine_matrix, matching_forward, matching_logits, proto_forward, proto_logits
from mgimn.optim import adam_step
from mgimn.tensor import Tensor, softmax


def probs(logits):
    return softmax(logits, axis=-1).data


def test_matching_identical_supports_uniform(rng):
    v = rng.standard_normal(4)
    supports = Tensor(np.tile(v, (3, 2, 1)))
    out = probs(matching_logits(Tensor(rng.standard_normal((2, 4))), supports))
    np.testing.assert_allclose(out, 1 / 3, atol=1e-12)


def test_matching_orthogonal_example():
    n = 4
    eye = np.eye(n)
    supports = Tensor(eye[:, None, :])  # K = 1, class n owns basis vector n
    out = probs(matching_logits(Tensor(eye[2:3]), supports))[0]
    expected = math.e / (math.e + (n - 1))
    assert out[2] == pytest.approx(expected, abs=1e-12)
    assert out.argmax() == 2
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-6)


def test_matching_attention_sum_form(rng):
    q = rng.standard_normal((1, 5))
    s = rng.standard_normal((3, 2, 5))
    sims = np.array([[q[0] @ x / np.linalg.norm(q[0]) / np.linalg.norm(x) for x in row] for row in s])
    expected = np.exp(sims).sum(1) / np.exp(sims).sum()
    np.testing.assert_allclose(probs(matching_logits(Tensor(q), Tensor(s)))[0], expected, atol=1e-12)


def test_zero_norm_cosine_is_zero():
    sims = cosine_matrix(Tensor(np.zeros((1, 3))), Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(sims.data, 0.0)


@given(st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(c):
    rng = np.random.default_rng(5)
    q, s = rng.standard_normal((1, 6)), rng.standard_normal((1, 6))
    a = cosine_matrix(Tensor(q), Tensor(s)).item()
    b = cosine_matrix(Tensor(q), Tensor(c * s)).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_proto_query_at_prototype(rng):
    s = rng.standard_normal((3, 2, 4))
    q = s[1].mean(0, keepdims=True)
    assert probs(proto_logits(Tensor(q), Tensor(s)))[0].argmax() == 1


def test_proto_identical_prototypes_uniform(rng):
    s = np.tile(rng.standard_normal(4), (5, 3, 1))
    np.testing.assert_allclose(probs(proto_logits(Tensor(rng.standard_normal((2, 4))), Tensor(s))), 0.2,
                               atol=1e-12)


def test_proto_hand_example():
    s = Tensor([[[0.0, 0.0], [2.0, 2.0]], [[1.0, -1.0], [3.0, -1.0]]])  # prototypes (1,1) and (2,-1)
    q = Tensor([[1.0, 0.0]])
    np.testing.assert_allclose(proto_logits(q, s).data, [[-1.0, -2.0]], atol=1e-12)


@pytest.mark.parametrize("forward", [matching_forward, proto_forward])
def test_within_class_permutation_invariance(small_corpus, forward):
    ds, vocab, seqs = small_corpus
    model = tiny_model(len(vocab), kind="proto")
    support, query, _ = random_episode(seqs, ds.labels, 3, 3, 3, np.random.default_rng(2))
    flipped = [row[::-1] for row in support]
    a = forward(support, query, model.params, model.enc_cfg).data
    b = forward(flipped, query, model.params, model.enc_cfg).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", ["proto", "matching"])
def test_training_decreases_loss(small_corpus, kind):
    ds, vocab, seqs = small_corpus
    model = tiny_model(len(vocab), kind=kind, hidden=16, seed=0)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        support, query, labels = random_episode(seqs, ds.labels, 3, 2, 3, rng)
        model.params.zero_grad()
        loss = model.loss(support, query, labels, training=False)
        loss.backward()
        adam_step(model.params, 1e-3)
        losses.append(loss.item())
    windows = np.array(losses).reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows
