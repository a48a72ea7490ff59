"""Tensor arithmetic, tape construction and gradient accumulation."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from factortransfer.errors import ContractError, DimensionError
from factortransfer.tensor import (Tape, Tensor, backward, flatten, mean, no_grad, pick, precision, row_pnorm,
                                   square, tabs, tsum)


def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_sum_gives_ones_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(square(x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(square(x)))
    backward(tsum(square(x)))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_loss_is_a_contract_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_shape_mismatch_is_a_dimension_error():
    with pytest.raises(DimensionError, match="shape"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_tensor_division_rejected():
    with pytest.raises(ContractError):
        Tensor([1.0]) / Tensor([2.0])


def test_shared_subexpression_visited_once():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    z = y + y
    tape = Tape.from_root(tsum(z))
    ids = [id(t) for t, _ in tape]
    assert len(ids) == len(set(ids))
    backward(tsum(z))
    np.testing.assert_allclose(x.grad, [12.0])


def test_tape_is_topological():
    x = Tensor(np.ones(4), requires_grad=True)
    a = x * 2.0
    b = square(a)
    c = a + b
    loss = tsum(c)
    order = [t for t, _ in Tape.from_root(loss)]
    assert len(order) == 4  # mul, square, add, sum
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        if t.node is not None:
            for parent in t.node.parents:
                if id(parent) in pos:
                    assert pos[id(parent)] < pos[id(t)]


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    backward(tsum(y))
    np.testing.assert_allclose(x.grad, [1.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_intermediate_grads_not_stored_on_non_leaves():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = x * 2.0
    backward(tsum(y))
    assert y.grad is None
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_unreached_leaf_keeps_no_grad():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    backward(tsum(x * 2.0))
    assert unused.grad is None


def test_mean_and_abs_gradients():
    x = Tensor([[-1.0, 2.0], [3.0, -4.0]], requires_grad=True)
    backward(mean(tabs(x)))
    np.testing.assert_allclose(x.grad, np.sign(x.data) / 4)


def test_row_pnorm_values_and_zero_subgradient():
    a = Tensor([[3.0, -4.0], [0.0, 0.0]], requires_grad=True)
    np.testing.assert_allclose(row_pnorm(a, 1).data, [7.0, 0.0])
    out = row_pnorm(a, 2)
    np.testing.assert_allclose(out.data, [5.0, 0.0])
    backward(tsum(out))
    np.testing.assert_allclose(a.grad, [[0.6, -0.8], [0.0, 0.0]])
    with pytest.raises(ContractError):
        row_pnorm(a, 3)


def test_pick_and_flatten():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    picked = pick(a, np.array([2, 0]))
    np.testing.assert_allclose(picked.data, [2.0, 3.0])
    backward(tsum(picked))
    np.testing.assert_allclose(a.grad, [[0, 0, 1], [1, 0, 0]])
    assert flatten(Tensor(np.zeros((2, 3, 4, 5)))).shape == (2, 60)


def test_item_requires_single_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-10, 10)))
def test_linear_combination_gradient_property(values):
    with precision(np.float64):
        x = Tensor(values, requires_grad=True)
        backward(tsum(x * 3.0 - x + 1.5))
    np.testing.assert_allclose(x.grad, np.full(values.shape, 2.0))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5)))
def test_square_gradient_property(values):
    with precision(np.float64):
        x = Tensor(values, requires_grad=True)
        backward(tsum(square(x)))
    np.testing.assert_allclose(x.grad, 2 * values)
