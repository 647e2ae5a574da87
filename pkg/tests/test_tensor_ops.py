"""Forward-value oracles for each tensor op, then gradient checks.

Hand-computed expected values are frozen inline; independent references
use float64 math or brute-force loops.
"""
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from stackseg.errors import ConfigError, ShapeError
from stackseg.tensor import Tensor, leaf, ops

from helpers import check_grads


def t(data, rg=False):
    return leaf(np.asarray(data, dtype=np.float32), requires_grad=rg)


class TestMatmul:
    def test_hand_example(self):
        # Triple-loop oracle: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
        out = ops.matmul(t([[1, 2], [3, 4]]), t([[5, 6], [7, 8]]))
        npt.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_batched_matches_loop(self, rng):
        a = rng.standard_normal((3, 2, 4, 5)).astype(np.float32)
        b = rng.standard_normal((3, 2, 5, 6)).astype(np.float32)
        out = ops.matmul(t(a), t(b)).data
        for i in range(3):
            for j in range(2):
                npt.assert_allclose(
                    out[i, j], a[i, j].astype(np.float64) @ b[i, j], rtol=1e-6
                )

    def test_batched_leading_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(t(np.ones((2, 3, 4))), t(np.ones((3, 4, 5))))

    def test_shared_rhs(self, rng):
        a = rng.standard_normal((4, 3, 5)).astype(np.float32)
        w = rng.standard_normal((5, 2)).astype(np.float32)
        out = ops.matmul(t(a), t(w)).data
        npt.assert_allclose(out, a.astype(np.float64) @ w, rtol=1e-6)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_matches_triple_loop(self, m, k, n):
        gen = np.random.default_rng(m * 100 + k * 10 + n)
        a = gen.standard_normal((m, k))
        b = gen.standard_normal((k, n))
        expect = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                for q in range(k):
                    expect[i, j] += a[i, q] * b[q, j]
        out = ops.matmul(t(a), t(b)).data
        npt.assert_allclose(out, expect, atol=1e-5)

    def test_grads(self, rng):
        a = leaf(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        b = leaf(rng.standard_normal((4, 2)).astype(np.float32), requires_grad=True)
        check_grads(lambda: ops.reduce_sum(ops.gelu(ops.matmul(a, b))), [a, b])

    def test_grads_batched_shared(self, rng):
        a = leaf(0.5 * rng.standard_normal((2, 3, 4)).astype(np.float32), True)
        w = leaf(0.5 * rng.standard_normal((4, 3)).astype(np.float32), True)
        check_grads(lambda: ops.reduce_sum(ops.gelu(ops.matmul(a, w))), [a, w])


class TestConv2d:
    def test_hand_sum(self):
        x = t([[[[1, 2], [3, 4]]]])
        k = t(np.ones((1, 1, 2, 2)))
        out = ops.conv2d(x, k)
        npt.assert_array_equal(out.data, [[[[10.0]]]])

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = ops.conv2d(t(x), t(k))
        npt.assert_array_equal(out.data, x)

    def test_stride_and_padding_shapes(self, rng):
        x = t(rng.standard_normal((1, 1, 8, 8)).astype(np.float32))
        k = t(rng.standard_normal((2, 1, 3, 3)).astype(np.float32))
        assert ops.conv2d(x, k, stride=2, padding=1).shape == (1, 2, 4, 4)
        assert ops.conv2d(x, k, stride=1, padding=0).shape == (1, 2, 6, 6)

    def test_zero_padding_is_zeros(self):
        # A 3x3 all-ones kernel over a single centered pixel: corners of the
        # padded field contribute nothing.
        x = np.zeros((1, 1, 3, 3), dtype=np.float32)
        x[0, 0, 1, 1] = 1.0
        out = ops.conv2d(t(x), t(np.ones((1, 1, 3, 3))), padding=1)
        npt.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            ops.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 3))))

    def test_bias(self):
        x = t(np.zeros((1, 2, 2, 2)))
        k = t(np.zeros((3, 2, 1, 1)))
        out = ops.conv2d(x, k, bias=t([1.0, 2.0, 3.0]))
        npt.assert_array_equal(out.data[0, :, 0, 0], [1.0, 2.0, 3.0])

    def test_grads(self, rng):
        x = leaf(rng.standard_normal((2, 2, 5, 5)).astype(np.float32), True)
        k = leaf(0.3 * rng.standard_normal((3, 2, 3, 3)).astype(np.float32), True)
        b = leaf(0.1 * rng.standard_normal(3).astype(np.float32), True)
        check_grads(
            lambda: ops.reduce_sum(ops.gelu(ops.conv2d(x, k, 2, 1, b))), [x, k, b]
        )


class TestConv3dDepth:
    def test_hand_column(self):
        x = np.zeros((1, 1, 3, 1, 1), dtype=np.float32)
        x[0, 0, :, 0, 0] = [1, 2, 3]
        k = np.ones((1, 1, 3, 1, 1), dtype=np.float32)
        out = ops.conv3d_depth(t(x), t(k), padding_d=1)
        npt.assert_array_equal(out.data[0, 0, :, 0, 0], [3.0, 6.0, 5.0])

    def test_centered_delta_is_identity(self, rng):
        x = rng.standard_normal((2, 2, 4, 3, 3)).astype(np.float32)
        k = np.zeros((2, 2, 3, 1, 1), dtype=np.float32)
        for c in range(2):
            k[c, c, 1, 0, 0] = 1.0
        out = ops.conv3d_depth(t(x), t(k), padding_d=1)
        npt.assert_array_equal(out.data, x)

    def test_single_slice_degenerate(self, rng):
        # D=1 with pad 1: only the central tap sees data.
        x = rng.standard_normal((1, 1, 1, 2, 2)).astype(np.float32)
        k = np.zeros((1, 1, 3, 1, 1), dtype=np.float32)
        k[0, 0, :, 0, 0] = [5.0, 2.0, 7.0]
        out = ops.conv3d_depth(t(x), t(k), padding_d=1)
        npt.assert_allclose(out.data, 2.0 * x, rtol=1e-6)

    def test_even_depth_rejected(self):
        with pytest.raises(ConfigError):
            ops.conv3d_depth(t(np.ones((1, 1, 4, 2, 2))), t(np.ones((1, 1, 2, 1, 1))))

    def test_spatial_extent_rejected(self):
        with pytest.raises(ShapeError):
            ops.conv3d_depth(t(np.ones((1, 1, 4, 2, 2))), t(np.ones((1, 1, 3, 3, 3))))

    def test_grads(self, rng):
        x = leaf(rng.standard_normal((2, 2, 4, 2, 2)).astype(np.float32), True)
        k = leaf(0.3 * rng.standard_normal((2, 2, 3, 1, 1)).astype(np.float32), True)
        b = leaf(0.1 * rng.standard_normal(2).astype(np.float32), True)
        check_grads(
            lambda: ops.reduce_sum(ops.gelu(ops.conv3d_depth(x, k, 1, b))), [x, k, b]
        )


class TestTransposedConv2d:
    def test_single_pixel_emits_kernel(self):
        x = np.zeros((1, 1, 1, 1), dtype=np.float32)
        x[0, 0, 0, 0] = 1.0
        k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)  # [C,O,2,2]
        out = ops.transposed_conv2d(t(x), t(k))
        npt.assert_array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_output_shape_doubles(self, rng):
        x = t(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
        k = t(rng.standard_normal((3, 6, 2, 2)).astype(np.float32))
        assert ops.transposed_conv2d(x, k).shape == (2, 6, 8, 10)

    def test_matches_scatter_loop(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        k = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
        expect = np.zeros((1, 2, 6, 6))
        for c in range(2):
            for o in range(2):
                for h in range(3):
                    for w in range(3):
                        for i in range(2):
                            for j in range(2):
                                expect[0, o, 2 * h + i, 2 * w + j] += (
                                    float(x[0, c, h, w]) * float(k[c, o, i, j])
                                )
        out = ops.transposed_conv2d(t(x), t(k))
        npt.assert_allclose(out.data, expect, atol=1e-5)

    def test_grads(self, rng):
        x = leaf(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), True)
        k = leaf(0.3 * rng.standard_normal((2, 3, 2, 2)).astype(np.float32), True)
        b = leaf(0.1 * rng.standard_normal(3).astype(np.float32), True)
        check_grads(
            lambda: ops.reduce_sum(ops.gelu(ops.transposed_conv2d(x, k, b))), [x, k, b]
        )


class TestLayerNorm:
    def test_two_point_example(self):
        out = ops.layer_norm(t([1.0, 3.0]), t([1.0, 1.0]), t([0.0, 0.0]), eps=1e-12)
        npt.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_normalized_stats(self, rng):
        x = t(rng.standard_normal((4, 7, 16)).astype(np.float32) * 3 + 2)
        out = ops.layer_norm(x, t(np.ones(16)), t(np.zeros(16)), eps=1e-8)
        mean = out.data.mean(axis=-1, dtype=np.float64)
        assert np.abs(mean).max() < 1e-6

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            ops.layer_norm(t([1.0, 2.0]), t([1.0, 1.0]), t([0.0, 0.0]), eps=0.0)

    def test_grads(self, rng):
        x = leaf(rng.standard_normal((3, 8)).astype(np.float32), True)
        g = leaf(1.0 + 0.1 * rng.standard_normal(8).astype(np.float32), True)
        b = leaf(0.1 * rng.standard_normal(8).astype(np.float32), True)
        check_grads(
            lambda: ops.reduce_sum(ops.gelu(ops.layer_norm(x, g, b, eps=1e-5))),
            [x, g, b],
        )


class TestPointwise:
    def test_gelu_reference(self):
        # Independent float64 evaluation of x * Phi(x).
        for x in [-2.0, -0.5, 0.0, 0.3, 1.0, 2.5]:
            expect = x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
            got = ops.gelu(t([x])).data[0]
            assert abs(got - expect) < 1e-6, (x, got, expect)

    def test_softmax_uniform(self):
        out = ops.softmax_lastdim(t([0.0, 0.0, 0.0]))
        npt.assert_allclose(out.data, [1 / 3] * 3, atol=1e-6)

    @given(st.integers(1, 6), st.integers(1, 5))
    def test_softmax_rows_sum_to_one(self, rows, k):
        gen = np.random.default_rng(rows * 10 + k)
        x = t(gen.standard_normal((rows, k)).astype(np.float32) * 5)
        s = ops.softmax_lastdim(x).data.sum(axis=-1)
        npt.assert_allclose(s, np.ones(rows), atol=1e-6)

    def test_add_scale_exact(self):
        a, b = t([1.5, -2.0]), t([0.25, 4.0])
        npt.assert_array_equal(ops.add(a, b).data, [1.75, 2.0])
        npt.assert_array_equal(ops.scale(a, 2.0).data, [3.0, -4.0])

    def test_add_broadcast(self):
        a = t(np.zeros((2, 3, 4)))
        b = t(np.arange(4))
        out = ops.add(a, b)
        npt.assert_array_equal(out.data[1, 2], [0, 1, 2, 3])

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            ops.add(t(np.ones((2, 3))), t(np.ones((2, 4))))

    def test_exp_log_roundtrip(self, rng):
        x = t(rng.uniform(0.1, 3.0, size=7).astype(np.float32))
        npt.assert_allclose(ops.log(ops.exp(x)).data, x.data, atol=1e-6)

    def test_div(self):
        out = ops.div(t([2.0, 9.0]), t([4.0, 3.0]))
        npt.assert_allclose(out.data, [0.5, 3.0])

    def test_pointwise_grads(self, rng):
        x = leaf(rng.uniform(0.2, 2.0, size=(3, 4)).astype(np.float32), True)
        y = leaf(rng.uniform(0.5, 2.0, size=(4,)).astype(np.float32), True)

        def f():
            z = ops.mul(x, y)
            z = ops.div(z, ops.add(y, ops.exp(x)))
            z = ops.log(ops.add(z, t(np.full((3, 4), 2.0))))
            return ops.reduce_sum(ops.softmax_lastdim(z))

        check_grads(f, [x, y])


class TestShapeOps:
    def test_reshape_permute_mapping(self):
        # [B=2,N=3,H,W] -> [6,H,W]: (b, n) lands at 3b + n.
        x = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
        out = ops.reshape(t(x), (6, 2, 2))
        for b in range(2):
            for n in range(3):
                npt.assert_array_equal(out.data[3 * b + n], x[b, n])

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            ops.reshape(t(np.ones((2, 3))), (7,))

    @given(
        st.permutations([0, 1, 2]),
        st.integers(1, 3),
        st.integers(1, 3),
        st.integers(1, 3),
    )
    def test_permute_round_trip(self, perm, a, b, c):
        x = np.random.default_rng(a * 100 + b * 10 + c).standard_normal((a, b, c))
        xt = t(x.astype(np.float32))
        fwd = ops.transpose(xt, perm)
        inv = tuple(int(i) for i in np.argsort(perm))
        back = ops.transpose(fwd, inv)
        npt.assert_array_equal(back.data, xt.data)

    def test_permute_values(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = ops.transpose(t(x), (1, 0))
        npt.assert_array_equal(out.data, x.T)

    def test_reduce_sum_axes(self, rng):
        x = rng.standard_normal((2, 3, 4)).astype(np.float32)
        out = ops.reduce_sum(t(x), axes=(0, 2))
        npt.assert_allclose(out.data, x.sum(axis=(0, 2), dtype=np.float64), rtol=1e-6)
        assert ops.reduce_sum(t(x)).shape == ()

    def test_shape_op_grads(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4)).astype(np.float32), True)

        def f():
            z = ops.transpose(x, (2, 0, 1))
            z = ops.reshape(z, (4, 6))
            return ops.reduce_sum(ops.gelu(z))

        check_grads(f, [x])
