"""Depth adapters: identity at init, depth-only mixing, reshape contracts."""
import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import erf

from stackseg.errors import ConfigError, ShapeError
from stackseg.adapter3d import (
    adapter_forward,
    adapter_param_count,
    build_adapter_set,
    init_adapter,
    named_adapter_params,
    reshape_from_3d,
    reshape_to_3d,
    LN_EPS,
)
from stackseg.tensor import backward, leaf, ops
from helpers import check_grads


def numpy_reference(m, p, batch, slices):
    """Norm -> down -> depth conv -> gelu -> up, residual. Plain numpy."""
    x = m.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + LN_EPS)
    x = xhat * p.norm_gamma.data + p.norm_beta.data
    x = x @ p.w_down.data.astype(np.float64)
    bn, h, w, c = x.shape
    vol = x.reshape(batch, slices, h, w, c).transpose(0, 4, 1, 2, 3)
    k = p.conv_kernel.data.astype(np.float64)[:, :, :, 0, 0]  # [c_out, c_in, 3]
    padded = np.pad(vol, ((0, 0), (0, 0), (1, 1), (0, 0), (0, 0)))
    out = np.zeros_like(vol)
    for o in range(c):
        for ci in range(c):
            for t in range(3):
                out[:, o] += k[o, ci, t] * padded[:, ci, t : t + slices]
        out[:, o] += p.conv_bias.data[o]
    out = 0.5 * out * (1.0 + erf(out / np.sqrt(2.0)))
    flat = out.transpose(0, 2, 3, 4, 1).reshape(bn, h, w, c)
    return m.astype(np.float64) + flat @ p.w_up.data.astype(np.float64)


def randomized(p, rng):
    for t in (p.w_up, p.conv_bias):
        t.data[...] = 0.3 * rng.standard_normal(t.shape).astype(np.float32)
    return p


class TestForward:
    def test_identity_at_init(self, rng):
        p = init_adapter(8, 4, seed=0, tag="a")
        m = leaf(rng.standard_normal((6, 2, 2, 8)).astype(np.float32))
        out = adapter_forward(m, 2, 3, p)
        npt.assert_array_equal(out.data, m.data)

    def test_matches_numpy_reference(self, rng):
        p = randomized(init_adapter(6, 3, seed=1, tag="a"), rng)
        m = rng.standard_normal((4, 2, 3, 6)).astype(np.float32)
        got = adapter_forward(leaf(m), 2, 2, p)
        npt.assert_allclose(got.data, numpy_reference(m, p, 2, 2), atol=1e-5)

    def test_depth_only_mixing(self, rng):
        # Perturbing one in-plane site leaks across slices at that site only.
        p = randomized(init_adapter(6, 3, seed=2, tag="a"), rng)
        m = rng.standard_normal((9, 4, 5, 6)).astype(np.float32)
        m2 = m.copy()
        m2[4, 2, 3, :] += 1.0  # batch 1, slice 1, site (2, 3)
        a = adapter_forward(leaf(m), 3, 3, p).data
        b = adapter_forward(leaf(m2), 3, 3, p).data
        diff = a != b
        assert diff[3:6, 2, 3, :].any()
        mask = np.zeros_like(diff)
        mask[3:6, 2, 3, :] = True
        assert not diff[~mask].any()

    def test_other_batches_untouched(self, rng):
        p = randomized(init_adapter(6, 3, seed=3, tag="a"), rng)
        m = rng.standard_normal((6, 2, 2, 6)).astype(np.float32)
        m2 = m.copy()
        m2[0] += 1.0
        a = adapter_forward(leaf(m), 2, 3, p).data
        b = adapter_forward(leaf(m2), 2, 3, p).data
        npt.assert_array_equal(a[3:], b[3:])

    def test_bottleneck_bounds(self):
        with pytest.raises(ConfigError):
            init_adapter(8, 8, seed=0, tag="a")
        with pytest.raises(ConfigError):
            init_adapter(8, 0, seed=0, tag="a")

    def test_gradients(self, rng):
        p = randomized(init_adapter(4, 2, seed=4, tag="a"), rng)
        m = leaf(rng.standard_normal((2, 2, 2, 4)).astype(np.float32), requires_grad=True)
        params = {
            "norm_gamma": p.norm_gamma,
            "norm_beta": p.norm_beta,
            "w_down": p.w_down,
            "conv_kernel": p.conv_kernel,
            "conv_bias": p.conv_bias,
            "w_up": p.w_up,
            "input": m,
        }

        def fn():
            out = adapter_forward(m, 1, 2, p)
            return ops.reduce_sum(ops.mul(out, out))

        check_grads(fn, params, tol=5e-3)


class TestReshape:
    def test_index_mapping(self, rng):
        m = leaf(rng.standard_normal((6, 2, 3, 4)).astype(np.float32))
        vol = reshape_to_3d(m, batch=2, slices=3)
        assert vol.shape == (2, 4, 3, 2, 3)
        for b in range(2):
            for n in range(3):
                for ch in range(4):
                    npt.assert_array_equal(
                        vol.data[b, ch, n], m.data[b * 3 + n, :, :, ch]
                    )

    def test_round_trip(self, rng):
        m = leaf(rng.standard_normal((6, 2, 3, 4)).astype(np.float32))
        back = reshape_from_3d(reshape_to_3d(m, 2, 3), 2, 3)
        npt.assert_array_equal(back.data, m.data)

    def test_shape_validation(self, rng):
        m = leaf(rng.standard_normal((5, 2, 2, 4)).astype(np.float32))
        with pytest.raises(ShapeError):
            reshape_to_3d(m, batch=2, slices=3)


class TestAdapterSet:
    def test_placement_sites(self):
        for placement, per_block in (("before", 1), ("after", 1), ("both", 2)):
            s = build_adapter_set(depth=4, dim=8, bottleneck=4, placement=placement, seed=0)
            assert len(s.table) == 4 * per_block
        with pytest.raises(ConfigError):
            build_adapter_set(4, 8, 4, "middle", 0)

    def test_sites_are_independent(self):
        s = build_adapter_set(depth=2, dim=8, bottleneck=4, placement="both", seed=0)
        a = s.get(0, "before")
        b = s.get(0, "after")
        assert a is not None and b is not None and a.w_down is not b.w_down
        assert s.get(1, "before") is not a

    def test_before_only_lookup(self):
        s = build_adapter_set(depth=2, dim=8, bottleneck=4, placement="before", seed=0)
        assert s.get(0, "before") is not None
        assert s.get(0, "after") is None

    def test_param_count_matches_enumeration(self):
        s = build_adapter_set(depth=3, dim=16, bottleneck=4, placement="both", seed=0)
        total = sum(t.size for _, t in named_adapter_params(s))
        assert total == adapter_param_count(16, 4, sites=6)
