import numpy as np
import pytest

from gaflow import tensor as T
from gaflow.errors import ContractError, DimensionError
from gaflow.tensor import Tape, Tensor, backward


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True, dtype=dtype)


def test_product_rule():
    a = leaf([2.0, 3.0])
    b = leaf([5.0, 7.0])
    with Tape() as tape:
        loss = T.tsum(a * b)
        backward(loss)
        tape.clear()
    assert np.allclose(a.grad, [5.0, 7.0])
    assert np.allclose(b.grad, [2.0, 3.0])


def test_leaf_gradients_accumulate():
    a = leaf([1.0, -2.0])
    with Tape():
        backward(T.tsum(T.square(a)))
        backward(T.tsum(T.square(a)))
    assert np.allclose(a.grad, [4.0, -8.0])


def test_zero_grad_resets():
    a = leaf([1.0])
    with Tape():
        backward(T.tsum(a * 3.0))
    a.zero_grad()
    assert np.all(a.grad == 0)


def test_broadcast_adjoint_is_summed():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones((1, 3)))
    with Tape():
        backward(T.tsum(a + b))
    assert b.grad.shape == (1, 3)
    assert np.allclose(b.grad, 2.0)


def test_incompatible_shapes_raise():
    with pytest.raises(DimensionError):
        leaf(np.ones((2, 3))) + leaf(np.ones((4,)))


def test_backward_needs_scalar():
    a = leaf([1.0, 2.0])
    with Tape():
        with pytest.raises(ContractError):
            backward(a * 2.0)


def test_unused_leaf_receives_zero_gradient():
    a = leaf([1.0, 2.0])
    b = leaf([3.0])
    with Tape():
        c = b * 1.0
        backward(T.tsum(a * 2.0))
    assert np.allclose(a.grad, 2.0)
    assert b.grad is None or np.all(b.grad == 0)


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with Tape() as tape:
        with T.no_grad():
            b = a * 2.0
        assert len(tape) == 0
    assert not b.requires_grad


def test_cleared_tape_cannot_backward():
    a = leaf([1.0])
    with Tape() as tape:
        loss = T.tsum(a * 2.0)
        tape.clear()
    with pytest.raises(ContractError):
        backward(loss)


def test_softmax_uses_channel_axis():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 7, 3, 4)))
    p = T.softmax(x)
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
    x3 = Tensor(np.zeros((5, 2, 2)))
    assert np.allclose(T.softmax(x3).data, 0.2)


def test_split_and_concat_channels():
    x = Tensor(np.arange(2 * 5 * 2 * 2).reshape(2, 5, 2, 2))
    a, b = T.split_channels(x, [2, 3])
    assert a.shape == (2, 2, 2, 2) and b.shape == (2, 3, 2, 2)
    assert np.array_equal(T.concat_channels([a, b]).data, x.data)
    with pytest.raises(DimensionError):
        T.split_channels(x, [2, 2])


def test_sigmoid_and_tanh_gradients():
    a = leaf([0.0])
    with Tape():
        backward(T.tsum(T.sigmoid(a)))
    assert np.allclose(a.grad, 0.25)
    b = leaf([0.0])
    with Tape():
        backward(T.tsum(T.tanh(b)))
    assert np.allclose(b.grad, 1.0)


def test_smooth_l1_values():
    x = Tensor([0.5, -2.0], dtype=np.float64)
    assert np.allclose(T.smooth_l1(x).data, [0.125, 1.5])


def test_precision_context():
    assert T.get_default_dtype() == np.float32
    with T.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ContractError):
        T.set_precision("float16")


def test_default_tape_is_emptied_by_backward():
    a = leaf([1.0, 2.0])
    loss = T.tsum(a * a)
    assert len(T.active_tape()) > 0
    backward(loss)
    assert len(T.active_tape()) == 0
    assert np.allclose(a.grad, [2.0, 4.0])
    with pytest.raises(ContractError):
        backward(loss)


def test_explicit_tape_is_kept_after_backward():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        backward(T.tsum(a * 3.0))
        assert len(tape) == 2
        tape.clear()
