import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xbarllm.errors import DimensionError
from xbarllm.modelir import LayerSpec, WeightSet, random_layer, zero_layer
from xbarllm.oracle import (add_norm, attention_forward, feedforward_forward, layer_forward, softmax,
                            variance)


def brute_attention(x, w, n_heads):
    """Row-by-row loops over plain Python floats, no numpy linear algebra."""
    n, m = len(x), len(x[0])
    dk = m // n_heads

    def mm(a, b):
        return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    q, k, v = mm(x, w.W_q.tolist()), mm(x, w.W_k.tolist()), mm(x, w.W_v.tolist())
    y = [[0.0] * m for _ in range(n)]
    for h in range(n_heads):
        for i in range(n):
            s = [sum(q[i][h * dk + c] * k[j][h * dk + c] for c in range(dk)) / math.sqrt(dk)
                 for j in range(n)]
            e = [math.exp(val) for val in s]
            tot = sum(e)
            for c in range(dk):
                y[i][h * dk + c] = sum(e[j] / tot * v[j][h * dk + c] for j in range(n))
    return np.array(mm(y, w.W_o.tolist()))


def test_zero_input_gives_zero_attention():
    spec = LayerSpec(3, 4, 8, 2, 2)
    w = random_layer(spec, 0)
    assert np.allclose(attention_forward(np.zeros((3, 4)), w, spec), 0.0)


def test_single_token_softmax_is_identity():
    spec = LayerSpec(1, 4, 8, 2, 2)
    w = random_layer(spec, 1)
    x = np.array([[0.3, -1.0, 2.0, 0.5]])
    v = x @ w.W_v
    assert np.allclose(attention_forward(x, w, spec), v @ w.W_o)


def test_small_integer_attention_matches_brute_force():
    spec = LayerSpec(2, 2, 2, 2, 1)
    eye = np.eye(2)
    w = WeightSet(W_q=np.array([[1.0, 0], [0, 1]]), W_k=np.array([[1.0, 1], [0, 1]]),
                  W_v=np.array([[2.0, 0], [1, 1]]), W_o=np.array([[1.0, -1], [0, 1]]),
                  gamma1=np.ones(2), beta1=np.zeros(2), W_a=eye, b_a=np.zeros(2), W_b=eye,
                  b_b=np.zeros(2), gamma2=np.ones(2), beta2=np.zeros(2))
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(attention_forward(x, w, spec), brute_attention(x.tolist(), w, 1), atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
def test_random_attention_matches_brute_force(heads):
    spec = LayerSpec(3, 4, 8, 4 // heads, heads)
    w = random_layer(spec, 7)
    x = np.random.default_rng(3).uniform(-1, 1, (3, 4))
    assert np.allclose(attention_forward(x, w, spec), brute_attention(x.tolist(), w, heads), atol=1e-12)


def test_feedforward_examples():
    spec = LayerSpec(3, 4, 5, 2, 2)
    w = zero_layer(spec)
    assert np.array_equal(feedforward_forward(np.zeros((3, 4)), w, spec), np.zeros((3, 4)))
    w = random_layer(spec, 2)
    w.b_a[:] = -1.0
    assert np.allclose(feedforward_forward(np.zeros((3, 4)), w, spec), np.tile(w.b_b, (3, 1)))


def test_feedforward_matches_loops():
    spec = LayerSpec(3, 4, 5, 2, 2)
    w = random_layer(spec, 4)
    x = np.random.default_rng(9).normal(size=(3, 4))
    expect = np.zeros((3, 4))
    for i in range(3):
        hidden = [max(0.0, sum(x[i, k] * w.W_a[k, j] for k in range(4)) + w.b_a[j]) for j in range(5)]
        for c in range(4):
            expect[i, c] = sum(hidden[j] * w.W_b[j, c] for j in range(5)) + w.b_b[c]
    assert np.allclose(feedforward_forward(x, w, spec), expect, atol=1e-6)


def test_add_norm_examples():
    beta = np.array([0.1, 0.2, 0.3])
    out = add_norm(np.full((1, 3), 5.0), np.zeros((1, 3)), np.ones(3), beta, 1e-5)
    assert np.allclose(out, beta)
    out = add_norm(np.array([[1.0, 2.0, 3.0]]), np.zeros((1, 3)), np.ones(3), np.zeros(3), 0.0)
    assert np.allclose(out, [[-1.22474487, 0.0, 1.22474487]], atol=1e-6)
    u = np.array([[0.5, -2.0, 1.0, 4.0]])
    one = add_norm(u, 0 * u, np.ones(4), np.zeros(4), 1e-5)
    two = add_norm(u, 0 * u, 2 * np.ones(4), np.full(4, 0.5), 1e-5)
    assert np.allclose(two, 2 * one + 0.5)


def test_add_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        add_norm(np.zeros((2, 3)), np.zeros((3, 2)), 1.0, 0.0, 1e-5)


def test_layer_forward_rejects_bad_shape():
    spec = LayerSpec(2, 4, 8, 2, 2)
    with pytest.raises(DimensionError):
        layer_forward(np.zeros((2, 3)), random_layer(spec, 0), spec)


def test_causal_mask_blocks_future_tokens():
    spec = LayerSpec(3, 2, 4, 2, 1)
    w = random_layer(spec, 0)
    x = np.random.default_rng(0).normal(size=(3, 2))
    x2 = x.copy()
    x2[2] += 10.0
    a = attention_forward(x, w, spec, causal=True)
    b = attention_forward(x2, w, spec, causal=True)
    assert np.allclose(a[:2], b[:2])


scores = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                elements=st.floats(-30, 30, allow_nan=False))


@given(scores)
def test_softmax_rows(s):
    p = softmax(s)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(softmax(s, stable=False), p, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_variance_identity(u):
    assert np.allclose(variance(u, identity=True), variance(u), atol=1e-9 * max(1.0, np.abs(u).max() ** 2))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(0.5, 3.0), st.floats(-1, 1))
def test_add_norm_row_statistics(u, gamma, beta):
    if np.any(variance(u) < 1e-2):
        return
    out = add_norm(u, np.zeros_like(u), gamma, beta, 1e-8)
    assert np.allclose(out.mean(axis=1), beta, atol=1e-6)
    assert np.allclose(out.std(axis=1), abs(gamma), rtol=1e-4)
