"""Gradient checks for every primitive in the reverse-mode engine."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soupkit import autodiff as ad
from oracles import central_fd, assert_grad_close

RNG = np.random.default_rng(20240817)


def sum_node(x):
    """Reduce a node to a scalar by summation, for building test losses."""
    xv = ad.val(x)
    out = np.float64(xv.sum())
    if not isinstance(x, ad.Node):
        return out
    return ad.Node(out, ((x, lambda g: np.full_like(xv, g)),))


def check_unary(op, x, *args):
    """FD-check the gradient of a unary op through a random linear projection."""
    weights = RNG.normal(size=np.shape(ad.val(op(x, *args))))

    def f(arr):
        return float((ad.val(op(arr, *args)) * weights).sum())

    node = ad.leaf(x)
    total = sum_node(ad.mul(op(node, *args), weights))
    ad.backward(total)
    assert_grad_close(node.grad, central_fd(f, x), label=op.__name__)


def check_binary_first(op, a, b):
    def f(arr):
        return float(ad.val(op(arr, b)).sum())

    node = ad.leaf(a)
    total = sum_node(op(node, b))
    ad.backward(total)
    assert_grad_close(node.grad, central_fd(f, a), label=f"{op.__name__}/lhs")


def check_binary_second(op, a, b):
    def f(arr):
        return float(ad.val(op(a, arr)).sum())

    node = ad.leaf(b)
    total = sum_node(op(a, node))
    ad.backward(total)
    assert_grad_close(node.grad, central_fd(f, b), label=f"{op.__name__}/rhs")


def test_untraced_inputs_return_plain_arrays():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4))
    out = ad.add(a, b)
    assert isinstance(out, np.ndarray)
    assert isinstance(ad.mul(a, 2.0), np.ndarray)


def test_traced_value_matches_untraced_value_bitwise():
    a = RNG.normal(size=(2, 5))
    b = RNG.normal(size=(5, 3))
    plain = a @ b
    traced = ad.matmul(ad.leaf(a), b)
    assert np.array_equal(ad.val(traced), plain)


def test_add_broadcast_grads():
    a = RNG.normal(size=(4, 3, 6))
    b = RNG.normal(size=(6,))
    check_binary_first(ad.add, a, b)
    check_binary_second(ad.add, a, b)


def test_mul_broadcast_grads():
    a = RNG.normal(size=(2, 3, 5))
    b = RNG.normal(size=(5,))
    check_binary_first(ad.mul, a, b)
    check_binary_second(ad.mul, a, b)
    check_binary_second(ad.mul, RNG.normal(size=(3, 1, 5)), RNG.normal(size=(4, 5)))


def test_matmul_grads_plain_and_stacked():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3, 5))
    check_binary_first(ad.matmul, a, b)
    check_binary_second(ad.matmul, a, b)
    # stacked batch dims, and a shared rhs that broadcasts over the batch
    a4 = RNG.normal(size=(2, 3, 4, 5))
    b4 = RNG.normal(size=(2, 3, 5, 6))
    check_binary_first(ad.matmul, a4, b4)
    check_binary_second(ad.matmul, a4, b4)
    check_binary_second(ad.matmul, RNG.normal(size=(2, 4, 3)), RNG.normal(size=(3, 6)))


def test_take_rows_grad_accumulates_repeats():
    table = RNG.normal(size=(7, 4))
    ids = np.array([[0, 3, 3], [6, 0, 1]])

    def f(arr):
        return float(arr[ids].sum())

    node = ad.leaf(table)
    total = sum_node(ad.take_rows(node, ids))
    ad.backward(total)
    assert_grad_close(node.grad, central_fd(f, table), label="take_rows")
    # row 3 and row 0 appear twice, so their gradient rows are 2
    assert node.grad[3, 0] == pytest.approx(2.0)


def test_mean_last_grad():
    check_unary(ad.mean_last, RNG.normal(size=(3, 4, 5)))


def test_rsqrt_grad():
    check_unary(ad.rsqrt, RNG.uniform(0.5, 3.0, size=(4, 4)))


def test_silu_grad():
    check_unary(ad.silu, RNG.normal(size=(3, 7)))


def test_softmax_last_grad():
    check_unary(ad.softmax_last, RNG.normal(size=(2, 3, 6)))


def test_softmax_rows_sum_to_one():
    x = RNG.normal(size=(5, 9)) * 30.0
    y = ad.softmax_last(x)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_reshape_swapaxes_grads():
    x = RNG.normal(size=(2, 3, 4))
    check_unary(ad.reshape, x, (2, 12))
    check_unary(ad.swapaxes, x, 1, 2)


def test_cross_entropy_value_and_grad():
    logits = RNG.normal(size=(2, 5, 7))
    targets = RNG.integers(0, 7, size=(2, 5))
    mask = (RNG.uniform(size=(2, 5)) > 0.3).astype(np.float64)
    mask[0, 0] = 1.0  # keep support non-empty

    def f(arr):
        return ad.masked_mean_cross_entropy_value(arr, targets, mask)

    node = ad.leaf(logits)
    loss = ad.masked_mean_cross_entropy(node, targets, mask)
    ad.backward(loss)
    assert_grad_close(node.grad, central_fd(f, logits), label="cross_entropy")


def test_stable_sigmoid_extremes():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = ad.stable_sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_backward_accumulates_shared_subgraph():
    x = ad.leaf(np.array([2.0]))
    y = ad.mul(x, x)  # x^2, same node twice
    ad.backward(sum_node(y))
    assert x.grad[0] == pytest.approx(4.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_unbroadcast_matches_fd_on_random_shapes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    b = rng.normal(size=(cols,))
    check_binary_second(ad.mul, a, b)
