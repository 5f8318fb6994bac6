import math

import numpy as np
import pytest

from mtn_tmt import tensor as T
from mtn_tmt.errors import ConfigError, ConformanceError, VocabError
from mtn_tmt.gradcheck import LAYER_CHECKS, run_check
from mtn_tmt.layers import (Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore,
                            causal_mask, dropout, embed, layer_norm, padding_mask, positional_encoding,
                            scaled_dot_attention)
from mtn_tmt.tensor import Tape, Tensor, backward


def test_parameter_names_are_unique():
    store = ParamStore()
    Linear(store, "a", 2, 2)
    with pytest.raises(ConfigError):
        Linear(store, "a", 2, 2)
    assert list(store) == ["a.weight", "a.bias"]


def test_xavier_bounds(rng):
    store = ParamStore(rng)
    w = store.xavier("w", 30, 50).data
    assert np.abs(w).max() <= math.sqrt(6 / 80)


def test_linear_identity_and_bias(rng):
    store = ParamStore(rng)
    layer = Linear(store, "lin", 3, 3)
    layer.weight.data[...] = np.eye(3)
    layer.bias.data[...] = 0.0
    x = rng.standard_normal((2, 3))
    assert np.array_equal(layer(Tensor(x)).data, x)
    layer.weight.data[...] = 0.0
    layer.bias.data[...] = [1.0, 2.0, 3.0]
    assert np.array_equal(layer(Tensor(x)).data, np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_linear_extent_mismatch():
    layer = Linear(ParamStore(), "lin", 3, 2)
    with pytest.raises(ConformanceError):
        layer(Tensor(np.ones((2, 4))))


def test_layer_norm_statistics(rng):
    x = Tensor(rng.standard_normal((50, 16)) * 7 + 3)
    y = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-6


def test_layer_norm_edge_rows():
    const = layer_norm(Tensor(np.full((1, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(const, np.zeros((1, 4)))
    out = layer_norm(Tensor(np.arange(4.0)[None]), Tensor(np.zeros(4)), Tensor(np.full(4, 2.5))).data
    assert np.array_equal(out, np.full((1, 4), 2.5))
    assert LayerNorm(ParamStore(), "n", 4).epsilon == 1e-6


def test_embedding_scaling_and_errors(rng):
    store = ParamStore(rng)
    emb = Embedding(store, "e", 6, 4)
    assert emb.table.shape == (6, 4)
    assert np.allclose(emb(np.array([3])).data[0], emb.table.data[3] * 2.0, atol=0, rtol=0)
    assert emb(np.zeros((0,), dtype=int)).shape == (0, 4)
    with pytest.raises(VocabError, match=r"\(1, 2\)"):
        emb(np.array([[0, 1, 2], [3, 4, 6]]))
    with pytest.raises(VocabError):
        emb(np.array([-1]))


def test_embedding_gradient_touches_only_looked_up_rows(rng):
    table = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    ids = np.array([[1, 4, 1]])
    with Tape():
        grads = backward(T.sum_(embed(ids, table) * rng.standard_normal((1, 3, 3))))
    touched = np.flatnonzero(np.abs(grads[table]).sum(axis=1))
    assert touched.tolist() == [1, 4]


def test_dropout_modes(rng):
    x = Tensor(rng.standard_normal((5, 5)))
    assert dropout(x, 1.0, True, rng) is x
    assert dropout(x, 0.3, False, rng) is x
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            dropout(x, bad, True, rng)


def test_dropout_is_unbiased(rng):
    out = dropout(Tensor(np.full(100_000, 3.0)), 0.5, True, rng).data
    assert abs(out.mean() - 3.0) / 3.0 < 0.01
    assert set(np.unique(out)) <= {0.0, 6.0}


def test_positional_encoding():
    pe = positional_encoding(50, 8)
    assert np.array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert round(pe[1, 0], 6) == 0.841471
    assert pe[7, 5] == pytest.approx(math.cos(7 / 10000 ** (4 / 8)), abs=1e-15)
    assert np.abs(pe).max() <= 1.0
    with pytest.raises(ConfigError):
        positional_encoding(3, 5)


def test_attention_uniform_over_identical_keys(rng):
    q = Tensor(rng.standard_normal((1, 3, 4)))
    k = Tensor(np.tile(rng.standard_normal(4), (1, 5, 1)))
    v = rng.standard_normal((1, 5, 2))
    out = scaled_dot_attention(q, k, Tensor(v)).data
    assert np.allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), out.shape), atol=1e-14)


def test_attention_single_open_position_and_blocked_rows(rng):
    q, k = Tensor(rng.standard_normal((1, 2, 4))), Tensor(rng.standard_normal((1, 5, 4)))
    v = rng.standard_normal((1, 5, 3))
    mask = np.full((2, 5), -1e9)
    mask[0, 2] = 0.0
    out = scaled_dot_attention(q, k, Tensor(v), mask[None]).data
    assert np.allclose(out[0, 0], v[0, 2], atol=1e-14)
    assert np.array_equal(out[0, 1], np.zeros(3))
    assert np.isfinite(out).all()


def test_attention_weight_rows_sum_to_one(rng):
    q, k = Tensor(rng.standard_normal((2, 4, 3))), Tensor(rng.standard_normal((2, 6, 3)))
    valid = np.array([[1, 1, 1, 1, 1, 1], [1, 1, 0, 0, 0, 0]], dtype=bool)
    eye = np.broadcast_to(np.eye(6), (2, 6, 6))
    weights = scaled_dot_attention(q, k, Tensor(eye.copy()), padding_mask(valid)[:, 0]).data
    assert np.abs(weights.sum(axis=-1) - 1).max() < 1e-12
    assert np.array_equal(weights[1, :, 2:], np.zeros((4, 4)))


def test_attention_shape_errors(rng):
    a = Tensor(rng.standard_normal((1, 2, 4)))
    with pytest.raises(ConformanceError):
        scaled_dot_attention(a, a, Tensor(np.ones((1, 3, 4))))
    with pytest.raises(ConformanceError):
        scaled_dot_attention(Tensor(np.ones((1, 2, 3))), a, a)


def test_causal_mask_blocks_future(rng):
    q, k = Tensor(rng.standard_normal((1, 5, 4))), Tensor(rng.standard_normal((1, 5, 4)))
    v = rng.standard_normal((1, 5, 2))
    base = scaled_dot_attention(q, k, Tensor(v), causal_mask(5)).data
    for t in range(5):
        bumped = v.copy()
        bumped[0, t + 1:] += 100.0
        out = scaled_dot_attention(q, k, Tensor(bumped), causal_mask(5)).data
        assert np.array_equal(out[0, :t + 1], base[0, :t + 1])


def test_multi_head_attention_contract(rng):
    with pytest.raises(ConfigError):
        MultiHeadAttention(ParamStore(), "a", 6, 4)
    store = ParamStore(rng)
    attn = MultiHeadAttention(store, "a", 8, 2)
    assert "a.k.bias" not in store
    xq, xkv = Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 5, 8)))
    assert attn(xq, xkv).shape == (2, 3, 8)


def test_single_head_is_projected_attention(rng):
    store = ParamStore(rng)
    attn = MultiHeadAttention(store, "a", 4, 1)
    xq, xkv = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 5, 4))
    q = xq @ attn.q.weight.data + attn.q.bias.data
    k = xkv @ attn.k.weight.data
    v = xkv @ attn.v.weight.data + attn.v.bias.data
    ctx = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    expected = ctx @ attn.out.weight.data + attn.out.bias.data
    assert np.allclose(attn(Tensor(xq), Tensor(xkv)).data, expected, atol=1e-13)


def test_padding_contributes_no_value_gradient(rng):
    store = ParamStore(rng)
    attn = MultiHeadAttention(store, "a", 4, 2)
    xq = Tensor(rng.standard_normal((1, 2, 4)))
    xkv = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
    mask = padding_mask(np.array([[1, 1, 0, 0]], dtype=bool))
    with Tape():
        grads = backward(T.sum_(attn(xq, xkv, mask) * rng.standard_normal((1, 2, 4))))
    assert np.array_equal(grads[xkv][0, 2:], np.zeros((2, 4)))


def test_feed_forward_zeros_and_shape(rng):
    store = ParamStore(rng)
    ffn = FeedForward(store, "f", 4)
    assert store["f.inner.weight"].shape == (4, 16)
    for p in store.values():
        if p.name.endswith("bias"):
            p.data[...] = 0.0
    assert np.array_equal(ffn(Tensor(np.zeros((2, 3, 4)))).data, np.zeros((2, 3, 4)))


@pytest.mark.parametrize("module", sorted(LAYER_CHECKS))
def test_gradient_checks(module):
    result = run_check(module)
    assert result.passed, f"{module}: {result.max_error:.3e} >= {result.tolerance}"
