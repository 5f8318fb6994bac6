"""Dense float64 tensors with a single-use reverse-mode gradient tape.

Usage::

    w = Tensor(np.ones((3, 3)), requires_grad=True)
    with Tape():
        loss = (w @ x).sum()
        grads = backward(loss)
    grads[w]

Every kernel below records its backward rule on the innermost active tape.
Outside a tape the kernels are plain numpy computations.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConformanceError, ContractError, NumericError, StateError

_state = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_idx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._idx = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return self._idx if self._tape is not None else None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations; consumed by one ``backward``."""

    def __init__(self):
        self._parents: list[tuple[int | None, ...]] = []
        self._rules: list[Callable | None] = []
        self._leaf_index: dict[int, int] = {}
        self._leaves: list[tuple[int, Tensor]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self._rules)

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StateError("tape already consumed by backward")
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._idx
        if not t.requires_grad:
            return None
        idx = self._leaf_index.get(id(t))
        if idx is None:
            idx = self._push((), None)
            self._leaf_index[id(t)] = idx
            self._leaves.append((idx, t))
        return idx

    def _push(self, parents, rule) -> int:
        if self.consumed:
            raise StateError("cannot record on a consumed tape")
        self._parents.append(parents)
        self._rules.append(rule)
        return len(self._rules) - 1


class Gradients:
    """Leaf gradients produced by ``backward``; unreached leaves read as zeros."""

    def __init__(self, pairs: Iterable[tuple[Tensor, np.ndarray]]):
        self._by_id = {id(t): (t, g) for t, g in pairs}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._by_id.get(id(t))
        return hit[1] if hit is not None else np.zeros_like(t.data)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)


def backward(loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not reachable from any tape leaf")
    if tape.consumed:
        raise StateError("tape already consumed by backward")
    tape.consumed = True
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss._idx] = np.ones_like(loss.data)
    for i in range(loss._idx, -1, -1):
        g = grads[i]
        rule = tape._rules[i]
        if g is None or rule is None:
            continue
        for p, gi in zip(tape._parents[i], rule(g)):
            if p is None or gi is None:
                continue
            grads[p] = gi if grads[p] is None else grads[p] + gi
        grads[i] = None
    return Gradients((t, grads[idx]) for idx, t in tape._leaves if grads[idx] is not None)


# -- recording helpers -------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    parents = tuple(tape.node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return result
    result._tape = tape
    result._idx = tape._push(parents, rule)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConformanceError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)) or np.any(x.data <= 0):
        raise NumericError("log: input must be finite and positive")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _record(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Entries where ``mask`` is true become ``value`` and stop the gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ConformanceError(f"masked_fill: mask {mask.shape} vs input {x.shape}") from None
    out = np.where(mask, value, x.data)
    return _record(out, (x,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), x.shape),))


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConformanceError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ConformanceError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), rule)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ConformanceError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ConformanceError(f"concat along {axis}: shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ConformanceError(f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}")
    index = (slice(None),) * axis + (slice(start, start + length),)

    def rule(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _record(x.data[index], (x,), rule)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """``table[ids]`` for an integer array of any shape; gradients scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)

    def rule(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _record(table.data[ids], (table,), rule)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``x`` (B, L, ...) with ``index`` (B, S) gives (B, S, ...)."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ConformanceError(f"take_rows: index {index.shape} vs input {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def rule(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, index), g)
        return (out,)

    return _record(x.data[rows, index], (x,), rule)


# -- normalisations and reductions -------------------------------------------

def softmax(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), rule)


def log_softmax(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _record(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def max_(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def rule(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, arg, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(out if keepdims else np.squeeze(out, axis), (x,), rule)


# -- finite-difference validation --------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` is re-evaluated with each coordinate of each tensor nudged
    by +/- ``step`` in place; the tensors are restored afterwards.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    if float(loss_fn().data) != float(loss_fn().data):
        raise StateError("function is not deterministic; disable dropout")
    with Tape():
        loss = loss_fn()
        if loss.node_id is None:
            grads = Gradients(())
        else:
            grads = backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = grads[t]
        numeric = np.empty_like(t.data)
        for i in range(t.size):
            orig = t.data.flat[i]
            t.data.flat[i] = orig + step
            up = float(loss_fn().data)
            t.data.flat[i] = orig - step
            down = float(loss_fn().data)
            t.data.flat[i] = orig
            numeric.flat[i] = (up - down) / (2 * step)
        if t.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    point.requires_grad = True
    return check_gradients(lambda: function(point), [point], step)
