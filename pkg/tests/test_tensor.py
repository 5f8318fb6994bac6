import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtn_tmt import tensor as T
from mtn_tmt.errors import ConformanceError, ContractError, NumericError, StateError
from mtn_tmt.tensor import Tape, Tensor, backward, check_gradients, grad_check

TOL = 1e-6
shapes = st.tuples(st.integers(1, 4), st.integers(1, 5))
seeds = st.integers(0, 2**31 - 1)


def leaf(rng, shape, positive=False):
    data = rng.standard_normal(shape)
    return Tensor(np.abs(data) + 0.5 if positive else data, requires_grad=True)


def weighted(out, rng):
    return T.sum_(out * rng.standard_normal(out.shape))


UNARY = {
    "exp": (T.exp, False), "log": (T.log, True), "sqrt": (T.sqrt, True), "tanh": (T.tanh, False),
    "scale": (lambda x: T.scale(x, -1.7), False), "softmax": (T.softmax, False),
    "log_softmax": (T.log_softmax, False), "transpose": (T.transpose, False),
    "sum_rows": (lambda x: T.sum_(x, axis=0), False), "mean_cols": (lambda x: T.mean(x, axis=-1), False),
    "max": (lambda x: T.max_(x, axis=-1), False), "reshape": (lambda x: T.reshape(x, (-1,)), False),
    "narrow": (lambda x: T.narrow(x, 1, 0, x.shape[1]), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100, deadline=None)
@given(shape=shapes, seed=seeds)
def test_unary_kernels_match_finite_differences(name, shape, seed):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(seed)
    x = leaf(rng, shape, positive)
    w = rng.standard_normal(fn(Tensor(x.data)).shape)
    assert check_gradients(lambda: T.sum_(fn(x) * w), [x]) < TOL


BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=100, deadline=None)
@given(shape=shapes, seed=seeds, broadcast=st.booleans())
def test_binary_kernels_with_broadcasting(name, shape, seed, broadcast):
    rng = np.random.default_rng(seed)
    a = leaf(rng, shape)
    b = leaf(rng, (1, shape[1]) if broadcast else shape, positive=name == "div")
    w = rng.standard_normal(shape)
    assert check_gradients(lambda: T.sum_(BINARY[name](a, b) * w), [a, b]) < TOL


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), batch=st.integers(1, 3), seed=seeds)
def test_batched_matmul(n, k, m, batch, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, (batch, n, k)), leaf(rng, (k, m))
    w = rng.standard_normal((batch, n, m))
    assert check_gradients(lambda: T.sum_(T.matmul(a, b) * w), [a, b]) < TOL


@settings(max_examples=100, deadline=None)
@given(seed=seeds, rows=st.integers(1, 6), width=st.integers(1, 4))
def test_gather_and_take_rows_scatter_add(seed, rows, width):
    rng = np.random.default_rng(seed)
    table = leaf(rng, (rows, width))
    ids = rng.integers(0, rows, size=(2, 3))
    x = leaf(rng, (2, 4, width))
    idx = rng.integers(0, 4, size=(2, 3))
    w1, w2 = rng.standard_normal((2, 3, width)), rng.standard_normal((2, 3, width))
    loss = lambda: T.sum_(T.gather_rows(table, ids) * w1) + T.sum_(T.take_rows(x, idx) * w2)  # noqa: E731
    assert check_gradients(loss, [table, x]) < TOL


@settings(max_examples=100, deadline=None)
@given(seed=seeds, shape=shapes)
def test_concat_masked_fill_and_relu(seed, shape):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, shape), leaf(rng, shape)
    mask = rng.random(shape) < 0.3
    w = rng.standard_normal((shape[0] * 2, shape[1]))

    def loss():
        joined = T.concat([T.relu(a), T.masked_fill(b, mask, -3.0)], axis=0)
        return T.sum_(joined * w)

    assert check_gradients(loss, [a, b]) < TOL


def test_softmax_cross_entropy_composite(rng):
    logits = leaf(rng, (5, 7))
    target = rng.integers(0, 7, size=5)

    def loss():
        return -T.mean(T.take_rows(T.reshape(T.log_softmax(logits), (5, 7, 1)), target[:, None]))

    assert check_gradients(loss, [logits]) < TOL


def test_grad_check_examples(rng):
    x = Tensor(rng.standard_normal(6))
    assert grad_check(lambda t: T.sum_(t * t), x) < 1e-9
    assert grad_check(lambda t: Tensor(3.0), Tensor(rng.standard_normal(3))) == 0.0


def test_grad_check_detects_wrong_gradient(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)

    def bogus(t):
        # exp forward with relu's backward rule
        out = T.relu(t)
        out.data[...] = np.exp(t.data)
        return T.sum_(out)

    assert grad_check(bogus, x) > 1e-2


def test_grad_check_rejects_nondeterminism(rng):
    x = Tensor(rng.standard_normal(3))
    noise = np.random.default_rng(0)
    with pytest.raises(StateError):
        grad_check(lambda t: T.sum_(t * noise.standard_normal(3)), x)


def test_softmax_rows(rng):
    out = T.softmax(Tensor(rng.standard_normal((50, 9)) * 5)).data
    assert np.all((out > 0) & (out < 1))
    assert np.max(np.abs(out.sum(axis=-1) - 1)) <= 1e-12


def test_reshape_and_transpose_round_trips_are_bit_identical(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    assert np.array_equal(T.reshape(T.reshape(x, (6, 4)), (2, 3, 4)).data, x.data)
    assert np.array_equal(T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0)).data, x.data)


def test_errors():
    with pytest.raises(ConformanceError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(NumericError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericError):
        T.softmax(Tensor([1.0, np.inf]))
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ContractError):
            backward(x * 2.0)


def test_tape_is_single_use():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x * x)
        backward(loss)
        with pytest.raises(StateError):
            backward(loss)
    with pytest.raises(StateError):
        with tape:
            pass


def test_unreached_leaf_reads_zero():
    x, y = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    with Tape():
        grads = backward(T.sum_(x))
    assert np.array_equal(grads[y], np.zeros(3))
    assert np.array_equal(grads[x], np.ones(2))


def test_shared_leaf_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        grads = backward(T.sum_(x * x + x))
    assert grads[x][0] == 5.0
