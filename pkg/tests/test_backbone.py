"""Frozen 2D encoder: stage splits, slice independence, override plumbing."""
import numpy as np
import numpy.testing as npt
import pytest

from stackseg.adapter3d import build_adapter_set
from stackseg.backbone import (
    BackboneConfig,
    attention,
    encode,
    init_encoder,
    named_encoder_params,
    patch_embed,
    preset_config,
    stage_ends,
)
from stackseg.errors import ConfigError, ShapeError
from stackseg.fact import init_factors
from stackseg.tensor import backward, leaf, ops
from helpers import check_grads


def tiny_cfg(depth=4, dim=8, heads=2, hw=32, slices=3):
    return BackboneConfig(depth=depth, dim=dim, heads=heads, input_hw=(hw, hw), slices=slices)


class TestConfig:
    def test_stage_ends(self):
        assert stage_ends(4) == (1, 2, 3, 4)
        assert stage_ends(6) == (1, 3, 4, 6)
        assert stage_ends(8) == (2, 4, 6, 8)
        assert stage_ends(32) == (8, 16, 24, 32)

    def test_stage_ends_reject_too_shallow(self):
        with pytest.raises(ConfigError):
            stage_ends(3)

    def test_presets(self):
        for name, (depth, dim) in (("vitB-like", (4, 32)), ("vitL-like", (6, 48)), ("vitH-like", (8, 64))):
            cfg = preset_config(name)
            assert (cfg.depth, cfg.dim) == (depth, dim)
            assert cfg.heads == max(1, dim // 16)
        with pytest.raises(ConfigError):
            preset_config("vitG-like")

    def test_validation(self):
        with pytest.raises(ConfigError):
            BackboneConfig(depth=4, dim=9, heads=2, input_hw=(32, 32), slices=3)
        with pytest.raises(ConfigError):
            BackboneConfig(depth=4, dim=8, heads=2, input_hw=(30, 32), slices=3)
        with pytest.raises(ConfigError):
            BackboneConfig(depth=4, dim=8, heads=2, input_hw=(32, 32), slices=4)

    def test_grid(self):
        assert tiny_cfg(hw=64).grid_hw == (4, 4)


class TestPatchEmbed:
    def test_zero_input_gives_bias_plus_pos(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        x = leaf(np.zeros((3, 1, 32, 32), dtype=np.float32))
        toks = patch_embed(params, cfg, x)
        assert toks.shape == (3, 2, 2, 8)
        npt.assert_allclose(toks.data, np.broadcast_to(params.patch_bias.data, toks.shape), atol=0)

    def test_patch_locality(self, rng):
        # A change inside one 16x16 patch moves only that token.
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        x = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
        x2 = x.copy()
        x2[0, 0, 20, 5] += 1.0  # patch row 1, col 0
        a = patch_embed(params, cfg, leaf(x)).data
        b = patch_embed(params, cfg, leaf(x2)).data
        diff = (a != b).any(axis=-1)
        npt.assert_array_equal(diff, [[[False, False], [True, False]]])


class TestAttention:
    def test_override_with_base_is_bit_identical(self, rng):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        blk = params.blocks[0]
        toks = leaf(rng.standard_normal((2, 2, 2, 8)).astype(np.float32))
        plain = attention(toks, blk, cfg.heads)
        overridden = attention(toks, blk, cfg.heads, q_override=blk.w_q, v_override=blk.w_v)
        npt.assert_array_equal(plain.data, overridden.data)

    def test_identical_tokens_attend_identically(self, rng):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        row = rng.standard_normal(8).astype(np.float32)
        toks = leaf(np.broadcast_to(row, (1, 2, 2, 8)).copy())
        out = attention(toks, params.blocks[0], cfg.heads).data
        npt.assert_allclose(out, np.broadcast_to(out[0, 0, 0], out.shape), atol=1e-6)


class TestEncode:
    def test_shapes_and_stage_count(self, rng):
        cfg = tiny_cfg(depth=6, dim=8, heads=2)
        params = init_encoder(cfg, seed=0)
        x = leaf(rng.standard_normal((6, 32, 32)).astype(np.float32))
        final, stages = encode(params, cfg, x, batch=2)
        assert final.shape == (6, 2, 2, 8)
        assert len(stages) == 4
        for s in stages:
            assert s.shape == final.shape
        npt.assert_array_equal(stages[3].data, final.data)

    def test_slice_independence_without_adapters(self, rng):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        x = rng.standard_normal((6, 32, 32)).astype(np.float32)
        x2 = x.copy()
        x2[1] += 0.5
        a, _ = encode(params, cfg, leaf(x), batch=2)
        b, _ = encode(params, cfg, leaf(x2), batch=2)
        assert (a.data[1] != b.data[1]).any()
        keep = [0, 2, 3, 4, 5]
        npt.assert_array_equal(a.data[keep], b.data[keep])

    def test_zero_init_addons_give_bit_identical_features(self, rng):
        # Fresh low-rank factors and fresh adapters must not move any value.
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        facts = init_factors(cfg.dim, 2, cfg.depth, seed=1)
        adapters = build_adapter_set(cfg.depth, cfg.dim, 4, "both", seed=2)
        x = leaf(rng.standard_normal((3, 32, 32)).astype(np.float32))
        plain, plain_stages = encode(params, cfg, x, batch=1)
        rigged, rigged_stages = encode(params, cfg, x, batch=1, facts=facts, adapters=adapters)
        npt.assert_array_equal(plain.data, rigged.data)
        for ps, rs in zip(plain_stages, rigged_stages):
            npt.assert_array_equal(ps.data, rs.data)

    def test_shape_validation(self, rng):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        with pytest.raises(ShapeError):
            encode(params, cfg, leaf(np.zeros((3, 16, 32), dtype=np.float32)), batch=1)
        with pytest.raises(ShapeError):
            encode(params, cfg, leaf(np.zeros((4, 32, 32), dtype=np.float32)), batch=1)
        facts = init_factors(16, 2, cfg.depth, seed=0)
        with pytest.raises(ShapeError):
            encode(params, cfg, leaf(np.zeros((3, 32, 32), dtype=np.float32)), batch=1, facts=facts)

    def test_base_weights_stay_frozen(self):
        cfg = tiny_cfg()
        params = init_encoder(cfg, seed=0)
        for name, t in named_encoder_params(params):
            assert not t.requires_grad, name

    def test_gradients_flow_to_addons_only(self, rng):
        cfg = tiny_cfg(depth=4, dim=8, heads=2)
        params = init_encoder(cfg, seed=0)
        facts = init_factors(cfg.dim, 2, cfg.depth, seed=1)
        adapters = build_adapter_set(cfg.depth, cfg.dim, 2, "both", seed=2)
        # A zero core would zero the chain rule into u and v; nudge it.
        for i in range(cfg.depth):
            facts.sigma_q[i].data[...] = 0.1 * rng.standard_normal((2, 2)).astype(np.float32)
        x = leaf(rng.standard_normal((3, 32, 32)).astype(np.float32))
        final, _ = encode(params, cfg, x, batch=1, facts=facts, adapters=adapters)
        backward(ops.reduce_sum(ops.mul(final, final)))
        assert facts.u.grad is not None and np.any(facts.u.grad)
        assert facts.sigma_q[0].grad is not None and np.any(facts.sigma_q[0].grad)
        assert adapters.get(0, "before").w_up.grad is not None
        for _, t in named_encoder_params(params):
            assert t.grad is None

    def test_addon_gradients_numeric(self, rng):
        cfg = tiny_cfg(depth=4, dim=4, heads=1, hw=16, slices=3)
        params = init_encoder(cfg, seed=0)
        facts = init_factors(cfg.dim, 2, cfg.depth, seed=1)
        adapters = build_adapter_set(cfg.depth, cfg.dim, 2, "before", seed=2)
        for i in range(cfg.depth):
            facts.sigma_q[i].data[...] = 0.1 * rng.standard_normal((2, 2)).astype(np.float32)
            facts.sigma_v[i].data[...] = 0.1 * rng.standard_normal((2, 2)).astype(np.float32)
            adapters.get(i, "before").w_up.data[...] = 0.1 * rng.standard_normal((2, 4)).astype(np.float32)
        x = leaf(rng.standard_normal((3, 16, 16)).astype(np.float32))
        probes = {
            "u": facts.u,
            "sigma_q1": facts.sigma_q[1],
            "sigma_v2": facts.sigma_v[2],
            "ad0.down": adapters.get(0, "before").w_down,
            "ad3.kernel": adapters.get(3, "before").conv_kernel,
        }

        def fn():
            final, _ = encode(params, cfg, x, batch=1, facts=facts, adapters=adapters)
            return ops.reduce_sum(ops.mul(final, final))

        check_grads(fn, probes, tol=5e-3, h=1e-2)
