import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from point_transformer import numerics as nx
from point_transformer.attention import (
    AttentionConfig,
    MhaBlockParams,
    MultiheadParams,
    attention,
    cross_mha,
    mha_block,
    multihead,
    score,
    self_mha,
)
from point_transformer.numerics import ShapeError

import oracles


def _mh(d_m=8, h=2, seed=0):
    return MultiheadParams.create("mh", AttentionConfig(d_m, h), np.random.default_rng(seed))


def test_score_hand_case():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = score(q, q).data
    a, b = math.exp(1 / math.sqrt(2)), 1.0
    np.testing.assert_allclose(s, [[a / (a + b), b / (a + b)], [b / (a + b), a / (a + b)]], atol=1e-15)


def test_score_rows_sum_to_one():
    rng = np.random.default_rng(1)
    s = score(rng.normal(size=(7, 4)), rng.normal(size=(5, 4))).data
    assert s.shape == (7, 5)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_score_width_mismatch():
    with pytest.raises(ShapeError):
        score(np.ones((2, 3)), np.ones((2, 4)))


def test_attention_with_identical_keys_averages_values():
    v = np.arange(12.0).reshape(4, 3)
    out = attention(np.ones((2, 5)), np.ones((4, 5)), v).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)


def test_attention_key_value_count_mismatch():
    with pytest.raises(ShapeError):
        attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((5, 3)))


def test_config_requires_divisible_heads():
    with pytest.raises(ShapeError):
        AttentionConfig(10, 3)
    assert AttentionConfig(512, 8).d_k == 64


@pytest.mark.parametrize("d_m, h", [(8, 1), (8, 2), (12, 3), (16, 8)])
def test_multihead_matches_per_head_oracle(d_m, h):
    rng = np.random.default_rng(d_m * h)
    p = _mh(d_m, h, seed=h)
    q, k, v = rng.normal(size=(5, d_m)), rng.normal(size=(7, d_m)), rng.normal(size=(7, d_m))
    np.testing.assert_allclose(multihead(q, k, v, p).data, oracles.multihead(q, k, v, p), atol=1e-10)


def test_multihead_batched_equals_loop():
    rng = np.random.default_rng(2)
    p = _mh()
    q, kv = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 6, 8))
    out = multihead(q, kv, kv, p).data
    for b in range(3):
        np.testing.assert_allclose(out[b], oracles.multihead(q[b], kv[b], kv[b], p), atol=1e-10)


def test_multihead_rejects_wrong_width():
    with pytest.raises(ShapeError):
        multihead(np.ones((2, 6)), np.ones((2, 8)), np.ones((2, 8)), _mh())


def test_multihead_rejects_config_mismatch():
    with pytest.raises(ShapeError):
        multihead(np.ones((2, 8)), np.ones((2, 8)), np.ones((2, 8)), _mh(), AttentionConfig(8, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.randoms(use_true_random=False))
def test_self_attention_is_permutation_equivariant(n, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    p = MhaBlockParams.create("b", 8, 2, np.random.default_rng(3))
    x = rng.normal(size=(n, 8))
    perm = np.array(rnd.sample(range(n), n))
    np.testing.assert_allclose(self_mha(x[perm], p).data, self_mha(x, p).data[perm], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.randoms(use_true_random=False))
def test_cross_attention_invariant_to_key_order(m, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    p = MhaBlockParams.create("b", 8, 2, np.random.default_rng(4))
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(m, 8))
    perm = np.array(rnd.sample(range(m), m))
    np.testing.assert_allclose(cross_mha(x, y[perm], p).data, cross_mha(x, y, p).data, atol=1e-10)


def test_mha_block_matches_oracle():
    rng = np.random.default_rng(5)
    p = MhaBlockParams.create("b", 8, 2, rng)
    x, y = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))

    def ln(z):
        return (z - z.mean(-1, keepdims=True)) / np.sqrt(z.var(-1, keepdims=True) + 1e-5)

    s = ln(x + oracles.multihead(x, y, y, p.multihead))
    w0, w1 = p.rff.weights[0].data, p.rff.weights[1].data
    expected = ln(s + np.maximum(s @ w0, 0) @ w1)
    np.testing.assert_allclose(mha_block(x, y, p).data, expected, atol=1e-9)


def test_narrowing_block_output_width():
    p = MhaBlockParams.create("b", 16, 4, np.random.default_rng(6), d_out=4)
    out = mha_block(np.ones((3, 16)), np.random.default_rng(7).normal(size=(5, 16)), p)
    assert out.shape == (3, 4)
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-6)


def test_cross_attention_query_count_sets_output_rows():
    p = MhaBlockParams.create("b", 8, 2, np.random.default_rng(8))
    out = cross_mha(np.ones((2, 8)), np.random.default_rng(9).normal(size=(11, 8)), p)
    assert out.shape == (2, 8)


def test_mha_block_gradients():
    rng = np.random.default_rng(10)
    p = MhaBlockParams.create("b", 8, 2, rng, d_out=4)
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    for layer_b in p.rff.biases:
        layer_b.data[...] = rng.normal(scale=0.1, size=layer_b.shape)
    params = [p.multihead.wq, p.multihead.wk, p.multihead.wv, p.multihead.wo, p.proj, p.ln1_gain, p.ln2_bias]
    params += list(p.rff.weights)
    w = rng.normal(size=(3, 4))
    err = nx.check_gradients(lambda ps: nx.sum_all(nx.mul(mha_block(x, y, p), w)), params)
    assert err < 1e-4


def test_head_views_share_storage():
    p = _mh()
    wq, _, _ = p.head(1)
    wq[...] = 7.0
    assert np.all(p.wq.data[:, 4:] == 7.0) and not np.any(p.wq.data[:, :4] == 7.0)
