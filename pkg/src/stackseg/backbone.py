"""Frozen 2D transformer encoder operating on merged slice batches.

A volume stack [B, N, H, W] is reshaped to [B*N, H, W] before entry, so
the encoder itself is purely 2D: every slice becomes an independent
batch element and, absent the depth adapters, no information crosses
slices anywhere in this module.

Blocks are pre-norm with global self-attention over all (H/16)*(W/16)
patch tokens of a slice. The block sequence is split into four
contiguous, near-equal stages; the token map at each stage boundary is
exposed for skip connections in the multiscale decoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .adapter3d import AdapterSet, adapter_forward
from .errors import ConfigError, ShapeError
from .fact import FacTFactors, effective_qv
from .tensor import Tensor, full, gaussian, zeros
from .tensor import ops

LN_EPS = 1e-6
PATCH = 16
INIT_SIGMA = 0.02

# Desk-scale stand-ins for the usual base/large/huge encoder family.
PRESETS = {
    "vitB-like": (4, 32),
    "vitL-like": (6, 48),
    "vitH-like": (8, 64),
}


def stage_ends(depth: int) -> tuple[int, int, int, int]:
    """Exclusive block indices ending each of the 4 contiguous stages."""
    ends = tuple(math.floor(depth * (i + 1) / 4) for i in range(4))
    if len(set(ends)) != 4 or ends[0] < 1:
        raise ConfigError(f"depth {depth} cannot be split into 4 non-empty stages")
    return ends


@dataclass
class BackboneConfig:
    depth: int
    dim: int
    heads: int
    input_hw: tuple[int, int] = (64, 64)
    slices: int = 5
    patch: int = PATCH

    def __post_init__(self):
        # depths below 4 lose the 4-stage split (and with it the
        # multiscale decoder) but are legal for small diagnostic models
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        h, w = self.input_hw
        if h % self.patch or w % self.patch:
            raise ConfigError(f"input {self.input_hw} not divisible by patch {self.patch}")
        if self.slices < 1 or self.slices % 2 == 0:
            raise ConfigError(f"slices must be odd and >= 1, got {self.slices}")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.input_hw[0] // self.patch, self.input_hw[1] // self.patch)

    @property
    def stage_ends(self) -> tuple[int, int, int, int]:
        return stage_ends(self.depth)


def preset_config(name: str, input_size: int = 64, slices: int = 5) -> BackboneConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown backbone preset {name!r}; options: {sorted(PRESETS)}")
    depth, dim = PRESETS[name]
    return BackboneConfig(
        depth=depth,
        dim=dim,
        heads=max(1, dim // 16),
        input_hw=(input_size, input_size),
        slices=slices,
    )


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor  # [d, 4d]
    mlp_b1: Tensor
    mlp_w2: Tensor  # [4d, d]
    mlp_b2: Tensor


@dataclass
class EncoderParams:
    patch_kernel: Tensor  # [d, 1, patch, patch]
    patch_bias: Tensor  # [d]
    pos: Tensor  # [h, w, d], zero-initialized learned offsets
    blocks: list[BlockParams]


def init_encoder(cfg: BackboneConfig, seed: int) -> EncoderParams:
    """Base weights; all leaves are frozen (requires_grad stays False)."""
    d = cfg.dim
    gh, gw = cfg.grid_hw

    def g(shape, tag):
        return gaussian(shape, INIT_SIGMA, seed, tag=f"encoder.{tag}")

    blocks = []
    for i in range(cfg.depth):
        blocks.append(
            BlockParams(
                ln1_gamma=full((d,), 1.0),
                ln1_beta=zeros((d,)),
                w_q=g((d, d), f"{i}.w_q"),
                w_k=g((d, d), f"{i}.w_k"),
                w_v=g((d, d), f"{i}.w_v"),
                w_o=g((d, d), f"{i}.w_o"),
                ln2_gamma=full((d,), 1.0),
                ln2_beta=zeros((d,)),
                mlp_w1=g((d, 4 * d), f"{i}.mlp_w1"),
                mlp_b1=zeros((4 * d,)),
                mlp_w2=g((4 * d, d), f"{i}.mlp_w2"),
                mlp_b2=zeros((d,)),
            )
        )
    return EncoderParams(
        patch_kernel=g((d, 1, cfg.patch, cfg.patch), "patch_kernel"),
        patch_bias=zeros((d,)),
        pos=zeros((gh, gw, d)),
        blocks=blocks,
    )


def named_encoder_params(params: EncoderParams) -> list[tuple[str, Tensor]]:
    out = [
        ("encoder.patch_kernel", params.patch_kernel),
        ("encoder.patch_bias", params.patch_bias),
        ("encoder.pos", params.pos),
    ]
    fields = (
        "ln1_gamma ln1_beta w_q w_k w_v w_o ln2_gamma ln2_beta "
        "mlp_w1 mlp_b1 mlp_w2 mlp_b2"
    ).split()
    for i, blk in enumerate(params.blocks):
        for name in fields:
            out.append((f"encoder.block{i}.{name}", getattr(blk, name)))
    return out


def patch_embed(params: EncoderParams, cfg: BackboneConfig, x: Tensor) -> Tensor:
    """[B*N, 1, H, W] -> token map [B*N, H/16, W/16, d] plus offsets.

    With zero-initialized offsets a constant zero input maps every token
    to the embedding bias.
    """
    z = ops.conv2d(x, params.patch_kernel, stride=cfg.patch, padding=0, bias=params.patch_bias)
    z = ops.transpose(z, (0, 2, 3, 1))
    return ops.add(z, params.pos)


def attention(
    tokens: Tensor,
    block: BlockParams,
    heads: int,
    q_override: Tensor | None = None,
    v_override: Tensor | None = None,
) -> Tensor:
    """Multi-head self-attention over all tokens of each slice.

    q_override / v_override substitute the projection matrices without
    touching the stored ones (the low-rank increment path).
    """
    bn, h, w, d = tokens.shape
    if d % heads:
        raise ShapeError(f"token dim {d} not divisible by heads {heads}")
    hd = d // heads
    t2 = ops.reshape(tokens, (bn, h * w, d))
    w_q = block.w_q if q_override is None else q_override
    w_v = block.w_v if v_override is None else v_override

    def split_heads(z: Tensor) -> Tensor:
        z = ops.reshape(z, (bn, h * w, heads, hd))
        return ops.transpose(z, (0, 2, 1, 3))

    q = split_heads(ops.matmul(t2, w_q))
    k = split_heads(ops.matmul(t2, block.w_k))
    v = split_heads(ops.matmul(t2, w_v))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = ops.softmax_lastdim(scores)
    mixed = ops.matmul(attn, v)  # [bn, heads, T, hd]
    mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (bn, h * w, d))
    out = ops.matmul(mixed, block.w_o)
    return ops.reshape(out, (bn, h, w, d))


def _mlp(tokens: Tensor, block: BlockParams) -> Tensor:
    z = ops.add(ops.matmul(tokens, block.mlp_w1), block.mlp_b1)
    z = ops.gelu(z)
    return ops.add(ops.matmul(z, block.mlp_w2), block.mlp_b2)


def block_forward(
    x: Tensor,
    block: BlockParams,
    cfg: BackboneConfig,
    batch: int,
    overrides: tuple[Tensor | None, Tensor | None],
    adapter_before,
    adapter_after,
) -> Tensor:
    if adapter_before is not None:
        x = adapter_forward(x, batch, cfg.slices, adapter_before)
    z = ops.layer_norm(x, block.ln1_gamma, block.ln1_beta, eps=LN_EPS)
    z = attention(z, block, cfg.heads, overrides[0], overrides[1])
    x = ops.add(x, z)
    if adapter_after is not None:
        x = adapter_forward(x, batch, cfg.slices, adapter_after)
    z = ops.layer_norm(x, block.ln2_gamma, block.ln2_beta, eps=LN_EPS)
    return ops.add(x, _mlp(z, block))


def encode(
    params: EncoderParams,
    cfg: BackboneConfig,
    x: Tensor,
    batch: int,
    facts: FacTFactors | None = None,
    adapters: AdapterSet | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder over a merged batch [B*N, H, W].

    Returns the final token map and the four stage-boundary token maps
    (the last stage feature is the final map itself).
    """
    H, W = cfg.input_hw
    if x.ndim != 3 or x.shape[1] != H or x.shape[2] != W:
        raise ShapeError(f"input must be [B*N, {H}, {W}], got {x.shape}")
    if x.shape[0] != batch * cfg.slices:
        raise ShapeError(
            f"merged batch {x.shape[0]} != batch {batch} * slices {cfg.slices}"
        )
    if facts is not None and (facts.dim != cfg.dim or facts.depth != cfg.depth):
        raise ShapeError("low-rank factors do not match backbone dims")

    bn = x.shape[0]
    tokens = patch_embed(params, cfg, ops.reshape(x, (bn, 1, H, W)))
    stages: list[Tensor] = []
    # below depth 4 there is no 4-way split; the final map is the only stage
    ends = cfg.stage_ends if cfg.depth >= 4 else (cfg.depth,)
    for i, block in enumerate(params.blocks):
        overrides: tuple[Tensor | None, Tensor | None] = (None, None)
        if facts is not None:
            overrides = effective_qv(facts, block.w_q, block.w_v, i)
        a_before = adapters.get(i, "before") if adapters is not None else None
        a_after = adapters.get(i, "after") if adapters is not None else None
        tokens = block_forward(tokens, block, cfg, batch, overrides, a_before, a_after)
        if i + 1 in ends:
            stages.append(tokens)
    return tokens, stages
