import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussianhead.autodiff import (ShapeMismatchError, Tensor, concat,
                                   custom_op, l1_loss, mse_loss, parameter)


class TestBasicOps:
    def test_sum_of_product_gradient_exact(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
        loss = (w * Tensor(x)).sum()
        loss.backward()
        assert np.array_equal(w.grad, x)

    def test_concat_lengths(self):
        a = Tensor(np.zeros(3))
        b = Tensor(np.zeros(5))
        assert concat([a, b], axis=0).data.shape == (8,)

    def test_relu_values(self):
        out = Tensor(np.array([-1.0, 0.0, 2.0])).relu()
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_detached_tensor_no_gradient(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=False)
        ((a * b).sum()).backward()
        assert a.grad is not None
        assert b.grad is None

    def test_backward_on_non_scalar_rejected(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (t * 2.0).backward()

    def test_matmul_gradients(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, (4, 2)), requires_grad=True)
        w = rng.normal(0, 1, (3, 2))
        ((a @ b) * Tensor(w)).sum().backward()
        assert np.allclose(a.grad, w @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ w)

    def test_getitem_scatters_gradient(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        (x[0:2] * 2.0).sum().backward()
        assert np.array_equal(x.grad, [[2.0, 2.0], [2.0, 2.0], [0.0, 0.0]])

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0 + x * 4.0
        y.sum().backward()
        assert np.allclose(x.grad, [7.0])

    def test_activation_values(self):
        x = Tensor(np.array([0.0]))
        assert np.isclose(x.sigmoid().data[0], 0.5)
        assert np.isclose(x.tanh().data[0], 0.0)
        assert np.isclose(x.exp().data[0], 1.0)


class TestLosses:
    def test_mse_zero_on_equal(self):
        a = Tensor(np.ones((4, 4)))
        assert mse_loss(a, Tensor(np.ones((4, 4)))).item() == 0.0

    def test_l1_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(0, 1, (5, 3)), rng.normal(0, 1, (5, 3))
        got = l1_loss(Tensor(a), Tensor(b)).item()
        assert np.isclose(got, np.abs(a - b).mean())

    def test_shape_mismatch(self):
        with pytest.raises((ShapeMismatchError, ValueError)):
            mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestCustomOp:
    def test_backward_hook_invoked(self):
        calls = []

        def bwd(g):
            calls.append(g.copy())
            return [g * 3.0]

        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = custom_op([x], x.data * 3.0, bwd)
        out.sum().backward()
        assert len(calls) == 1
        assert np.array_equal(x.grad, [3.0, 3.0])


class TestConcatGradients:
    def test_axis0_split(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4, 3)), requires_grad=True)
        w = np.concatenate([np.full((2, 3), 2.0), np.full((4, 3), 5.0)])
        (concat([a, b], axis=0) * Tensor(w)).sum().backward()
        assert np.all(a.grad == 2.0) and np.all(b.grad == 5.0)

    def test_axis1_split(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 4)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.data.shape == (3, 6)
        out.sum().backward()
        assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_broadcast_add_gradient_shapes(n, m):
    rng = np.random.default_rng(n * 7 + m)
    a = Tensor(rng.normal(0, 1, (n, m)), requires_grad=True)
    b = Tensor(rng.normal(0, 1, (m,)), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (n, m)
    assert b.grad.shape == (m,)
    assert np.allclose(b.grad, n)


def test_no_op_mutates_inputs():
    rng = np.random.default_rng(3)
    data = rng.normal(0, 1, (4, 4))
    x = Tensor(data.copy(), requires_grad=True)
    y = ((x.tanh() + x.sigmoid()) * 2.0 - x.exp()).abs().mean()
    y.backward()
    assert np.array_equal(x.data, data)


def test_parameter_requires_grad():
    p = parameter(np.zeros((2, 2)))
    assert p.requires_grad
