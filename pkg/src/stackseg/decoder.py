"""Trainable decoders that recover pixel resolution from patch tokens.

Three variants share one classification head:

* ``original``: two transposed-conv stages, logits at 1/4 input scale.
* ``progressive``: four stages, logits at full input scale.
* ``multiscale``: the progressive path plus learned skips from the
  encoder's intermediate stage features.

An optional prompt path injects a 3D bounding-box hint as corner and
center tokens that exchange information with the image tokens through
cross-attention before decoding. The path is only constructed when
``prompt_mode`` is not ``"off"`` so promptless models carry none of its
parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, constant, full, gaussian, zeros
from .tensor import ops

VARIANTS = ("original", "progressive", "multiscale")
PROMPT_MODES = ("off", "box")
LN_EPS = 1e-6
INIT_SIGMA = 0.02


def default_channels(variant: str, dim: int) -> tuple[int, ...]:
    """Channel schedule per upsampling step, chosen to keep the decoder
    a small fraction of the frozen encoder."""
    if dim % 8:
        raise ConfigError(f"token dim must be divisible by 8, got {dim}")
    if variant == "original":
        return (dim // 4, dim // 8)
    return (dim // 4, dim // 8, dim // 8, dim // 8)


@dataclass
class DecoderConfig:
    variant: str
    dim: int
    num_classes: int
    heads: int = 1
    channels: tuple[int, ...] = ()
    prompt_mode: str = "off"
    prompt_layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown decoder variant {self.variant!r}; options: {VARIANTS}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode {self.prompt_mode!r}; options: {PROMPT_MODES}")
        if not self.channels:
            self.channels = default_channels(self.variant, self.dim)
        self.channels = tuple(int(c) for c in self.channels)
        steps = 2 if self.variant == "original" else 4
        if len(self.channels) != steps:
            raise ConfigError(
                f"{self.variant} decoder needs {steps} channel entries, got {len(self.channels)}"
            )
        if any(c < 2 for c in self.channels):
            # each stage layer-normalizes over its channels; one channel
            # would normalize every value to the same constant
            raise ConfigError(f"channel counts must be >= 2, got {self.channels}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.dim % 4:
            raise ConfigError(f"token dim must be divisible by 4, got {self.dim}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.prompt_layers < 1:
            raise ConfigError("prompt path needs at least one cross-attention layer")

    @property
    def upscale(self) -> int:
        return 2 ** len(self.channels)


@dataclass
class StageParams:
    kernel: Tensor  # [C_in, C_out, 2, 2]
    bias: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class SkipParams:
    map_w: Tensor  # 1x1 channel map, [d, C]
    map_b: Tensor
    chain: list[StageParams]  # same-channel upsampling stages


@dataclass
class CrossAttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_q_gamma: Tensor
    ln_q_beta: Tensor
    ln_kv_gamma: Tensor
    ln_kv_beta: Tensor


@dataclass
class PromptLayerParams:
    box_reads_image: CrossAttnParams
    image_reads_box: CrossAttnParams


@dataclass
class PromptParams:
    box_offsets: Tensor  # [3, d], added to the sinusoidal box codes
    no_prompt: Tensor  # [3, d], stands in when no box applies to a slice
    layers: list[PromptLayerParams]
    # mask readout: the prompt tokens' final states map to a vector that
    # is dotted with position codes at output resolution, and the scalar
    # field gates the class logits. Cross-attention alone would have to
    # push box geometry through several normalized conv stages; this
    # short multiplicative circuit is how a box becomes a sharp region.
    read_w: Tensor  # [d, d]
    read_b: Tensor  # [d]
    read_gate: Tensor  # [K], zero at init so the field starts silent


@dataclass
class DecoderParams:
    stages: list[StageParams]
    skips: list[SkipParams | None]
    head_w: Tensor  # [C_last, K]
    head_b: Tensor
    prompt: PromptParams | None


def _stage(c_in: int, c_out: int, seed: int, tag: str) -> StageParams:
    return StageParams(
        kernel=gaussian((c_in, c_out, 2, 2), INIT_SIGMA, seed, tag=f"{tag}.kernel", requires_grad=True),
        bias=zeros((c_out,), requires_grad=True),
        ln_gamma=full((c_out,), 1.0, requires_grad=True),
        ln_beta=zeros((c_out,), requires_grad=True),
    )


def _cross_attn(dim: int, seed: int, tag: str) -> CrossAttnParams:
    # 1/sqrt(d) keeps the attention pathway's throughput O(1) at init;
    # the 0.02 used elsewhere leaves box information too attenuated to
    # ever pick up gradient against the direct image pathway
    sigma = dim**-0.5

    def g(name):
        return gaussian((dim, dim), sigma, seed, tag=f"{tag}.{name}", requires_grad=True)

    w_q = g("w_q")
    # w_k starts equal to w_q (separate tensors, same draw): then
    # E[w_q^T w_k] = I, so query/key position codes compare through an
    # identity-like bilinear form from step zero and attention starts
    # out position-aware instead of having to discover the alignment
    w_k = gaussian((dim, dim), sigma, seed, tag=f"{tag}.w_q", requires_grad=True)
    return CrossAttnParams(
        w_q=w_q,
        w_k=w_k,
        w_v=g("w_v"),
        w_o=g("w_o"),
        ln_q_gamma=full((dim,), 1.0, requires_grad=True),
        ln_q_beta=zeros((dim,), requires_grad=True),
        ln_kv_gamma=full((dim,), 1.0, requires_grad=True),
        ln_kv_beta=zeros((dim,), requires_grad=True),
    )


def init_decoder(cfg: DecoderConfig, seed: int) -> DecoderParams:
    stages = []
    c_in = cfg.dim
    for i, c_out in enumerate(cfg.channels):
        stages.append(_stage(c_in, c_out, seed, f"decoder.stage{i}"))
        c_in = c_out

    skips: list[SkipParams | None] = [None] * len(cfg.channels)
    if cfg.variant == "multiscale":
        # Steps 0..2 read encoder stages 2, 1, 0; the last step has no skip.
        for i in range(3):
            c = cfg.channels[i]
            chain = [
                _stage(c, c, seed, f"decoder.skip{i}.chain{j}") for j in range(i + 1)
            ]
            skips[i] = SkipParams(
                map_w=gaussian((cfg.dim, c), INIT_SIGMA, seed, tag=f"decoder.skip{i}.map", requires_grad=True),
                map_b=zeros((c,), requires_grad=True),
                chain=chain,
            )

    prompt = None
    if cfg.prompt_mode != "off":
        layers = [
            PromptLayerParams(
                box_reads_image=_cross_attn(cfg.dim, seed, f"decoder.prompt.layer{i}.box_reads_image"),
                image_reads_box=_cross_attn(cfg.dim, seed, f"decoder.prompt.layer{i}.image_reads_box"),
            )
            for i in range(cfg.prompt_layers)
        ]
        prompt = PromptParams(
            box_offsets=gaussian((3, cfg.dim), INIT_SIGMA, seed, tag="decoder.prompt.box_offsets", requires_grad=True),
            no_prompt=gaussian((3, cfg.dim), INIT_SIGMA, seed, tag="decoder.prompt.no_prompt", requires_grad=True),
            layers=layers,
            read_w=gaussian((cfg.dim, cfg.dim), cfg.dim**-0.5, seed, tag="decoder.prompt.read_w", requires_grad=True),
            read_b=zeros((cfg.dim,), requires_grad=True),
            read_gate=zeros((cfg.num_classes,), requires_grad=True),
        )

    return DecoderParams(
        stages=stages,
        skips=skips,
        head_w=gaussian((cfg.channels[-1], cfg.num_classes), INIT_SIGMA, seed, tag="decoder.head", requires_grad=True),
        head_b=zeros((cfg.num_classes,), requires_grad=True),
        prompt=prompt,
    )


def _stage_names(st: StageParams, tag: str):
    return [
        (f"{tag}.kernel", st.kernel),
        (f"{tag}.bias", st.bias),
        (f"{tag}.ln_gamma", st.ln_gamma),
        (f"{tag}.ln_beta", st.ln_beta),
    ]


def _cross_attn_names(ca: CrossAttnParams, tag: str):
    out = []
    for name in ("w_q", "w_k", "w_v", "w_o", "ln_q_gamma", "ln_q_beta", "ln_kv_gamma", "ln_kv_beta"):
        out.append((f"{tag}.{name}", getattr(ca, name)))
    return out


def named_decoder_params(params: DecoderParams) -> list[tuple[str, Tensor]]:
    out = []
    for i, st in enumerate(params.stages):
        out.extend(_stage_names(st, f"decoder.stage{i}"))
    for i, skip in enumerate(params.skips):
        if skip is None:
            continue
        out.append((f"decoder.skip{i}.map_w", skip.map_w))
        out.append((f"decoder.skip{i}.map_b", skip.map_b))
        for j, st in enumerate(skip.chain):
            out.extend(_stage_names(st, f"decoder.skip{i}.chain{j}"))
    out.append(("decoder.head_w", params.head_w))
    out.append(("decoder.head_b", params.head_b))
    if params.prompt is not None:
        out.append(("decoder.prompt.box_offsets", params.prompt.box_offsets))
        out.append(("decoder.prompt.no_prompt", params.prompt.no_prompt))
        for i, layer in enumerate(params.prompt.layers):
            out.extend(_cross_attn_names(layer.box_reads_image, f"decoder.prompt.layer{i}.box_reads_image"))
            out.extend(_cross_attn_names(layer.image_reads_box, f"decoder.prompt.layer{i}.image_reads_box"))
        out.append(("decoder.prompt.read_w", params.prompt.read_w))
        out.append(("decoder.prompt.read_b", params.prompt.read_b))
        out.append(("decoder.prompt.read_gate", params.prompt.read_gate))
    return out


def decoder_param_count(cfg: DecoderConfig) -> int:
    """Closed form mirroring init_decoder, cross-checked against the registry."""

    def stage_count(c_in, c_out):
        return c_in * c_out * 4 + c_out + 2 * c_out

    total = 0
    c_in = cfg.dim
    for c_out in cfg.channels:
        total += stage_count(c_in, c_out)
        c_in = c_out
    if cfg.variant == "multiscale":
        for i in range(3):
            c = cfg.channels[i]
            total += cfg.dim * c + c + (i + 1) * stage_count(c, c)
    total += cfg.channels[-1] * cfg.num_classes + cfg.num_classes
    if cfg.prompt_mode != "off":
        total += 2 * 3 * cfg.dim  # box offsets + no-prompt rows, 3 tokens each
        total += cfg.prompt_layers * 2 * (4 * cfg.dim * cfg.dim + 4 * cfg.dim)
        total += cfg.dim * cfg.dim + cfg.dim + cfg.num_classes  # mask readout
    return total


# ---------------------------------------------------------------------------
# Prompt encoding


@dataclass(frozen=True)
class PromptSpec:
    """3D bounding-box hint in volume voxel coordinates, inclusive ends."""

    box: tuple[int, int, int, int, int, int]  # (z0, y0, x0, z1, y1, x1)
    relax: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        z0, y0, x0, z1, y1, x1 = self.box
        if z1 < z0 or y1 < y0 or x1 < x0:
            raise ConfigError(f"degenerate prompt box {self.box}")
        if self.relax < 0:
            raise ConfigError(f"relaxation must be non-negative, got {self.relax}")


def relax_box(spec: PromptSpec, shape_zyx: tuple[int, int, int]) -> PromptSpec:
    """Expand each axis by ceil(relax * extent), clamped to the volume.

    Any positive relaxation pushes every face outward by at least one
    voxel; rounding down would silently turn a small relaxation of a
    small box into a no-op.
    """
    z0, y0, x0, z1, y1, x1 = spec.box
    lims = shape_zyx
    los, his = [z0, y0, x0], [z1, y1, x1]
    for ax in range(3):
        pad = math.ceil(spec.relax * (his[ax] - los[ax] + 1))
        los[ax] = max(0, los[ax] - pad)
        his[ax] = min(lims[ax] - 1, his[ax] + pad)
    return PromptSpec(box=(los[0], los[1], los[2], his[0], his[1], his[2]), relax=0.0, enabled=spec.enabled)


_KERNEL_BAND = 8  # frequencies beyond this get zero amplitude


def _sincos(ys: np.ndarray, xs: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos codes over harmonic frequencies, [len(ys), dim].

    Frequencies are the harmonics pi, 2*pi, ... with triangular amplitude
    decay (Fejer weighting) over the first _KERNEL_BAND of them. The dot
    product of two codes is then a smooth nonnegative-leaning bump in the
    coordinate difference, peaked at zero and wide enough to register on
    a coarse token grid; untapered bands oscillate at the grid pitch and
    attention cannot read positions through them.
    """
    quarter = dim // 4
    band = min(quarter, _KERNEL_BAND)
    freqs = math.pi * (np.arange(quarter, dtype=np.float64) + 1.0)
    amps = np.zeros(quarter, dtype=np.float64)
    amps[:band] = np.sqrt(1.0 - np.arange(band, dtype=np.float64) / band)
    out = np.empty((len(ys), dim), dtype=np.float64)
    for row in range(len(ys)):
        ya, xa = ys[row] * freqs, xs[row] * freqs
        out[row, 0::4][:quarter] = amps * np.sin(ya)
        out[row, 1::4][:quarter] = amps * np.cos(ya)
        out[row, 2::4][:quarter] = amps * np.sin(xa)
        out[row, 3::4][:quarter] = amps * np.cos(xa)
    return out.astype(np.float32)


def box_features(box_yx: tuple[int, int, int, int], hw: tuple[int, int], dim: int) -> np.ndarray:
    """Sinusoidal codes for a box: two corners plus the center, [3, dim].

    Coordinates are normalized by (extent - 1) so a full-image box maps
    to (0, 0) and (1, 1). The center token gives attention a direct
    handle on the box interior; corners alone would force it to compose
    four half-plane tests before anything inside the box lights up.
    """
    y0, x0, y1, x1 = box_yx
    h, w = hw
    ys = np.array([y0, y1, (y0 + y1) / 2.0], dtype=np.float64) / max(1, h - 1)
    xs = np.array([x0, x1, (x0 + x1) / 2.0], dtype=np.float64) / max(1, w - 1)
    return _sincos(ys, xs, dim)


def grid_position_features(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed position codes for token-cell centers, [gh*gw, dim].

    The frozen encoder's zero positional offsets leave tokens without
    any location signature, so the prompt cross-attention adds these to
    queries and keys; a box prompt has nothing to gate against
    otherwise. Cell centers use the same code layout as the corners.
    """
    ii, jj = np.mgrid[0:gh, 0:gw]
    ys = ((ii.ravel() + 0.5) / gh).astype(np.float64)
    xs = ((jj.ravel() + 0.5) / gw).astype(np.float64)
    return _sincos(ys, xs, dim)


def build_prompt_tokens(
    prompt: PromptParams,
    specs: list[PromptSpec | None],
    z_indices: np.ndarray,
    hw: tuple[int, int],
    dim: int,
) -> Tensor:
    """Assemble per-slice prompt tokens for a merged batch, [B*N, 3, dim].

    A slice gets the box tokens (corners plus center) when its stack's
    prompt is enabled and its global z index falls inside the box's z
    range; otherwise it gets the learned no-prompt triple. Relaxation
    must be applied beforehand (see relax_box); boxes here are taken
    literally.
    """
    z_indices = np.asarray(z_indices)
    if z_indices.ndim != 2:
        raise ShapeError(f"z_indices must be [B, N], got {z_indices.shape}")
    b, n = z_indices.shape
    if len(specs) != b:
        raise ShapeError(f"{len(specs)} prompt specs for batch of {b}")
    feats = np.zeros((b * n, 3, dim), dtype=np.float32)
    mask = np.zeros((b * n, 1, 1), dtype=np.float32)
    for i, spec in enumerate(specs):
        if spec is None or not spec.enabled:
            continue
        z0, y0, x0, z1, y1, x1 = spec.box
        code = box_features((y0, x0, y1, x1), hw, dim)
        for j in range(n):
            z = int(z_indices[i, j])
            if z0 <= z <= z1:
                feats[i * n + j] = code
                mask[i * n + j] = 1.0
    feats_t = constant(feats)
    mask_t = constant(mask)
    inv_mask = constant(1.0 - mask)
    boxed = ops.mul(mask_t, ops.add(feats_t, prompt.box_offsets))
    blank = ops.mul(inv_mask, prompt.no_prompt)
    return ops.add(boxed, blank)


# ---------------------------------------------------------------------------
# Forward


def _mhca(
    q_tokens: Tensor,
    kv_tokens: Tensor,
    p: CrossAttnParams,
    heads: int,
    q_pos: Tensor | None = None,
    kv_pos: Tensor | None = None,
) -> Tensor:
    """Multi-head cross-attention, [M, Tq, d] reading [M, Tk, d].

    Position codes, when given, enter queries and keys only; values
    carry pure content.
    """
    m, tq, d = q_tokens.shape
    tk = kv_tokens.shape[1]
    hd = d // heads

    def split(z: Tensor, t: int) -> Tensor:
        return ops.transpose(ops.reshape(z, (m, t, heads, hd)), (0, 2, 1, 3))

    q_in = ops.add(q_tokens, q_pos) if q_pos is not None else q_tokens
    k_in = ops.add(kv_tokens, kv_pos) if kv_pos is not None else kv_tokens
    q = split(ops.matmul(q_in, p.w_q), tq)
    k = split(ops.matmul(k_in, p.w_k), tk)
    v = split(ops.matmul(kv_tokens, p.w_v), tk)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    mixed = ops.matmul(ops.softmax_lastdim(scores), v)
    mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (m, tq, d))
    return ops.matmul(mixed, p.w_o)


def _ln(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ops.layer_norm(x, gamma, beta, eps=LN_EPS)


_POS_GAIN = 2.0  # image-side position codes vs O(1) content noise in attention


def _prompt_interaction(
    tokens: Tensor, prompt_tokens: Tensor, params: PromptParams, heads: int
) -> tuple[Tensor, Tensor]:
    """Two-way exchange; returns the image map and the prompt final states."""
    m, gh, gw, d = tokens.shape
    img = ops.reshape(tokens, (m, gh * gw, d))
    pos = constant(_POS_GAIN * grid_position_features(gh, gw, d))
    pr = prompt_tokens
    for layer in params.layers:
        a = layer.box_reads_image
        pr = ops.add(pr, _mhca(_ln(pr, a.ln_q_gamma, a.ln_q_beta), _ln(img, a.ln_kv_gamma, a.ln_kv_beta), a, heads, kv_pos=pos))
        b = layer.image_reads_box
        img = ops.add(img, _mhca(_ln(img, b.ln_q_gamma, b.ln_q_beta), _ln(pr, b.ln_kv_gamma, b.ln_kv_beta), b, heads, q_pos=pos))
    return ops.reshape(img, (m, gh, gw, d)), pr


def _mask_field(pr: Tensor, params: PromptParams, hw: tuple[int, int]) -> Tensor:
    """Per-slice logit field [M, h, w, 1] read out of the prompt tokens.

    The mean prompt state maps through a linear layer to a vector whose
    dot product with the output-resolution position codes forms a spatial
    field; read_gate scales it per class at the head. The position codes'
    kernel makes the field a bump around whatever position the readout
    vector encodes, so a box center becomes a region in one linear step.
    """
    m, t, d = pr.shape
    h, w = hw
    mean_pr = ops.scale(ops.reduce_sum(pr, axes=(1,)), 1.0 / t)
    vec = ops.add(ops.matmul(mean_pr, params.read_w), params.read_b)
    phi = constant(grid_position_features(h, w, d).T)  # [d, h*w]
    field = ops.matmul(vec, phi)  # [M, h*w]
    return ops.reshape(field, (m, h, w, 1))


def _upsample_stage(x: Tensor, st: StageParams) -> Tensor:
    z = ops.transpose(x, (0, 3, 1, 2))
    z = ops.transposed_conv2d(z, st.kernel, bias=st.bias)
    z = ops.transpose(z, (0, 2, 3, 1))
    return ops.gelu(_ln(z, st.ln_gamma, st.ln_beta))


def _run_skip(stage_feat: Tensor, skip: SkipParams) -> Tensor:
    z = ops.add(ops.matmul(stage_feat, skip.map_w), skip.map_b)
    for st in skip.chain:
        z = _upsample_stage(z, st)
    return z


def decode(
    params: DecoderParams,
    cfg: DecoderConfig,
    tokens: Tensor,
    stages: list[Tensor] | None = None,
    prompt_tokens: Tensor | None = None,
) -> Tensor:
    """Token map [M, gh, gw, d] -> logits [M, K, gh*u, gw*u]."""
    if tokens.ndim != 4 or tokens.shape[3] != cfg.dim:
        raise ShapeError(f"expected token map [M, gh, gw, {cfg.dim}], got {tokens.shape}")
    pr_final = None
    if cfg.prompt_mode == "off":
        if prompt_tokens is not None:
            raise ConfigError("prompt tokens passed to a promptless decoder")
    else:
        if prompt_tokens is None:
            raise ConfigError("prompt-enabled decoder requires prompt tokens")
        tokens, pr_final = _prompt_interaction(tokens, prompt_tokens, params.prompt, cfg.heads)
    if cfg.variant == "multiscale":
        if stages is None or len(stages) != 4:
            raise ConfigError("multiscale decoder requires the four encoder stage features")

    x = tokens
    for i, st in enumerate(params.stages):
        x = _upsample_stage(x, st)
        if params.skips[i] is not None:
            x = ops.add(x, _run_skip(stages[2 - i], params.skips[i]))
    logits = ops.add(ops.matmul(x, params.head_w), params.head_b)
    if pr_final is not None:
        field = _mask_field(pr_final, params.prompt, (logits.shape[1], logits.shape[2]))
        gate = ops.reshape(params.prompt.read_gate, (1, 1, 1, cfg.num_classes))
        logits = ops.add(logits, ops.mul(field, gate))
    return ops.transpose(logits, (0, 3, 1, 2))
