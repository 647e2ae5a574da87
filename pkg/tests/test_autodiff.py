"""Graph mechanics: leaves, factories, backward walk, determinism."""
import numpy as np
import numpy.testing as npt
import pytest

from stackseg.errors import ContractError, ShapeError
from stackseg.tensor import (
    Tensor,
    backward,
    full,
    gaussian,
    leaf,
    no_grad,
    ops,
    uniform,
    zeros,
)


class TestFactories:
    def test_zeros_and_constant(self):
        z = zeros((2, 3))
        npt.assert_array_equal(z.data, np.zeros((2, 3)))
        c = full((4,), 2.5)
        npt.assert_array_equal(c.data, np.full(4, 2.5))

    def test_dtype_is_float32(self):
        for t in [zeros((2,)), full((2,), 1.0), uniform((2,), 0, 1, 0), gaussian((2,), 1, 0)]:
            assert t.data.dtype == np.float32
            assert t.data.flags["C_CONTIGUOUS"]

    def test_uniform_deterministic(self):
        a = uniform((16,), -1.0, 1.0, seed=7, tag="x")
        b = uniform((16,), -1.0, 1.0, seed=7, tag="x")
        npt.assert_array_equal(a.data, b.data)
        assert a.data.min() >= -1.0 and a.data.max() <= 1.0

    def test_streams_split_by_tag_and_seed(self):
        a = gaussian((32,), 1.0, seed=7, tag="x")
        b = gaussian((32,), 1.0, seed=7, tag="y")
        c = gaussian((32,), 1.0, seed=8, tag="x")
        assert not np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_bad_extent_rejected(self):
        for shape in [(0,), (2, -1), (3, 0, 2)]:
            with pytest.raises(ShapeError):
                zeros(shape)
        with pytest.raises(ShapeError):
            leaf(np.ones((2, 0)))

    def test_scalar_shape_allowed(self):
        s = full((), 3.0)
        assert s.shape == ()
        assert s.item() == 3.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        backward(ops.reduce_sum(x))
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(ops.scale(x, 2.0))

    def test_frozen_leaf_never_gets_grad(self):
        frozen = leaf(np.ones((3, 3)), requires_grad=False)
        live = leaf(np.ones((3, 3)), requires_grad=True)
        backward(ops.reduce_sum(ops.matmul(frozen, live)))
        assert frozen.grad is None
        assert live.grad is not None

    def test_accumulation_within_pass(self):
        # x used twice: gradients add.
        x = leaf(np.array([2.0]), requires_grad=True)
        backward(ops.reduce_sum(ops.mul(x, x)))
        npt.assert_allclose(x.grad, [4.0])

    def test_accumulation_across_passes(self):
        x = leaf(np.array([1.0, 2.0]), requires_grad=True)
        backward(ops.reduce_sum(x))
        backward(ops.reduce_sum(x))
        npt.assert_array_equal(x.grad, [2.0, 2.0])

    def test_diamond_graph(self):
        # y = a*x, z = x + y, loss = sum(z*z); d/dx = 2(1+a)^2 x
        x = leaf(np.array([3.0]), requires_grad=True)
        y = ops.scale(x, 2.0)
        z = ops.add(x, y)
        backward(ops.reduce_sum(ops.mul(z, z)))
        npt.assert_allclose(x.grad, [2 * 9.0 * 3.0])

    def test_no_grad_builds_no_graph(self):
        x = leaf(np.ones((2, 2)), requires_grad=True)
        with no_grad():
            y = ops.matmul(x, x)
        assert y.node is None

    def test_deep_chain_no_recursion_error(self):
        x = leaf(np.ones(4), requires_grad=True)
        y = x
        for _ in range(3000):
            y = ops.scale(y, 1.0)
        backward(ops.reduce_sum(y))
        npt.assert_array_equal(x.grad, np.ones(4))

    def test_storage_is_float32(self):
        x = leaf(np.ones((2, 2), dtype=np.float64), requires_grad=True)
        assert x.data.dtype == np.float32
        y = ops.matmul(x, x)
        assert y.data.dtype == np.float32
        backward(ops.reduce_sum(y))
        assert x.grad.dtype == np.float32
