"""Transformer building blocks on top of :mod:`mtn_tmt.tensor`."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConformanceError, VocabError
from .tensor import Tensor

NEG_INF = -1e9


class ParamStore:
    """Named parameters under unique dotted paths, in registration order."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def create(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        param = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = param
        return param

    def xavier(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.create(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def under(self, prefix: str) -> list[Tensor]:
        dotted = prefix + "."
        return [p for n, p in self._params.items() if n == prefix or n.startswith(dotted)]

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


def _check_trailing(x: Tensor, width: int, what: str) -> None:
    if x.ndim == 0 or x.shape[-1] != width:
        raise ConformanceError(f"{what}: expected trailing extent {width}, got shape {x.shape}")


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = store.xavier(f"{name}.weight", n_in, n_out)
        self.bias = store.create(f"{name}.bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        _check_trailing(x, self.n_in, "linear")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, width: int, epsilon: float = 1e-6):
        if width < 2:
            raise ConfigError("layer_norm needs width >= 2")
        self.width, self.epsilon = width, epsilon
        self.gain = store.create(f"{name}.gain", np.ones(width))
        self.shift = store.create(f"{name}.shift", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.epsilon)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, epsilon: float = 1e-6) -> Tensor:
    _check_trailing(x, gain.shape[-1], "layer_norm")
    centered = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(var + epsilon) * gain + shift


class Embedding:
    def __init__(self, store: ParamStore, name: str, vocab_size: int, width: int,
                 scale_by_sqrt_width: bool = True):
        self.vocab_size, self.width = vocab_size, width
        self.scale_by_sqrt_width = scale_by_sqrt_width
        self.table = store.xavier(f"{name}.table", vocab_size, width)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embed(ids, self.table, self.scale_by_sqrt_width)


def embed(ids, table: Tensor, scale_by_sqrt_width: bool = True) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.argwhere((ids < 0) | (ids >= table.shape[0]))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise VocabError(f"token id {int(ids[pos])} at position {pos} outside vocabulary of {table.shape[0]}")
    rows = T.gather_rows(table, ids)
    return T.scale(rows, math.sqrt(table.shape[1])) if scale_by_sqrt_width else rows


def dropout(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in evaluation mode or when ``keep_prob`` is 1."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * mask


def positional_encoding(length: int, width: int) -> np.ndarray:
    if width % 2:
        raise ConfigError(f"positional encoding needs an even width, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = np.power(10000.0, np.arange(0, width, 2, dtype=np.float64) / width)
    table = np.empty((length, width))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


# -- masks -------------------------------------------------------------------

def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, Tk) boolean validity -> additive (B, 1, 1, Tk) mask."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, NEG_INF)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor, mask=None,
                         keep_prob: float = 1.0, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_k) + mask) V over the last two axes.

    ``mask`` is additive (0 allowed, -1e9 blocked). Query rows whose keys are
    all blocked produce zeros.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ConformanceError(f"attention: keys {keys.shape} and values {values.shape} differ in length")
    if queries.shape[-1] != keys.shape[-1]:
        raise ConformanceError(f"attention: queries {queries.shape} and keys {keys.shape} differ in width")
    scores = T.scale(T.matmul(queries, T.swapaxes(keys, -1, -2)), 1.0 / math.sqrt(keys.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        scores = scores + mask
    weights = T.softmax(scores)
    if mask is not None:
        open_rows = (np.broadcast_to(mask, scores.shape) > NEG_INF / 2).any(axis=-1, keepdims=True)
        if not open_rows.all():
            weights = weights * open_rows
    weights = dropout(weights, keep_prob, training, rng)
    return T.matmul(weights, values)


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, width: int, heads: int):
        if heads < 1 or width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.q = Linear(store, f"{name}.q", width, width)
        # a key bias shifts every score of a query row equally: softmax ignores it
        self.k = Linear(store, f"{name}.k", width, width, bias=False)
        self.v = Linear(store, f"{name}.v", width, width)
        self.out = Linear(store, f"{name}.out", width, width)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, self.width // self.heads)), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask=None, keep_prob: float = 1.0,
                 training: bool = False, rng=None) -> Tensor:
        """``x_q`` (B, Tq, d), ``x_kv`` (B, Tk, d); mask broadcastable to (B, h, Tq, Tk)."""
        _check_trailing(x_q, self.width, "attention query")
        _check_trailing(x_kv, self.width, "attention memory")
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        ctx = scaled_dot_attention(q, k, v, mask, keep_prob, training, rng)
        b, _, t, _ = ctx.shape
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, self.width))
        return self.out(merged)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, width: int, hidden: int | None = None):
        hidden = hidden or 4 * width
        self.inner = Linear(store, f"{name}.inner", width, hidden)
        self.outer = Linear(store, f"{name}.outer", hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))
