"""Full segmentation model: frozen encoder plus trainable add-ons.

Assembly is governed by a components switch so ablations can drop the
low-rank increments, the depth adapters, or both while keeping the rest
of the pipeline identical. Parameter bookkeeping lives here: a single
ordered name -> tensor registry drives the optimizer, checkpointing,
and the closed-form count cross-check.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .adapter3d import (
    AdapterSet,
    adapter_param_count,
    build_adapter_set,
    named_adapter_params,
)
from .backbone import (
    BackboneConfig,
    EncoderParams,
    encode,
    init_encoder,
    named_encoder_params,
    preset_config,
)
from .decoder import (
    DecoderConfig,
    DecoderParams,
    PromptSpec,
    build_prompt_tokens,
    decode,
    decoder_param_count,
    init_decoder,
    named_decoder_params,
)
from .data.preprocess import bilinear_resize_2d
from .errors import ConfigError, ContractError, ShapeError
from .fact import FacTFactors, fact_param_count, init_factors, named_factor_params
from .tensor import Tensor, leaf, no_grad
from .tensor import ops

COMPONENTS = ("none", "fact", "adapters", "both")


@dataclass
class SegModel:
    backbone_cfg: BackboneConfig
    decoder_cfg: DecoderConfig
    encoder: EncoderParams
    facts: FacTFactors | None
    adapters: AdapterSet | None
    decoder: DecoderParams

    def named_params(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in named_encoder_params(self.encoder):
            out[name] = t
        if self.facts is not None:
            for name, t in named_factor_params(self.facts):
                out[name] = t
        if self.adapters is not None:
            for name, t in named_adapter_params(self.adapters):
                out[name] = t
        for name, t in named_decoder_params(self.decoder):
            out[name] = t
        return out

    def trainable_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t) for n, t in self.named_params().items() if t.requires_grad)

    def forward(self, stacks: np.ndarray, prompt_tokens: Tensor | None = None) -> Tensor:
        """[B, N, H, W] -> merged logits [B*N, K, h_out, w_out]."""
        arr = np.asarray(stacks, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"expected stacks [B, N, H, W], got {arr.shape}")
        b, n, h, w = arr.shape
        if n != self.backbone_cfg.slices:
            raise ShapeError(f"stack depth {n} != configured slices {self.backbone_cfg.slices}")
        x = leaf(arr.reshape(b * n, h, w))
        tokens, stages = encode(
            self.encoder, self.backbone_cfg, x, b, facts=self.facts, adapters=self.adapters
        )
        return decode(self.decoder, self.decoder_cfg, tokens, stages=stages, prompt_tokens=prompt_tokens)

    @property
    def output_hw(self) -> tuple[int, int]:
        gh, gw = self.backbone_cfg.grid_hw
        u = self.decoder_cfg.upscale
        return (gh * u, gw * u)


def build_model(
    backbone: str = "vitH-like",
    input_size: int = 64,
    slices: int = 5,
    num_classes: int = 3,
    rank: int = 4,
    bottleneck: int = 4,
    placement: str = "both",
    components: str = "both",
    decoder_variant: str = "progressive",
    prompt_mode: str = "off",
    seed: int = 0,
) -> SegModel:
    if components not in COMPONENTS:
        raise ConfigError(f"unknown components setting {components!r}; options: {COMPONENTS}")
    bcfg = preset_config(backbone, input_size=input_size, slices=slices)
    dcfg = DecoderConfig(
        variant=decoder_variant,
        dim=bcfg.dim,
        num_classes=num_classes,
        heads=bcfg.heads,
        prompt_mode=prompt_mode,
    )
    encoder = init_encoder(bcfg, seed)
    facts = None
    if components in ("fact", "both"):
        facts = init_factors(bcfg.dim, rank, bcfg.depth, seed)
    adapters = None
    if components in ("adapters", "both"):
        adapters = build_adapter_set(bcfg.depth, bcfg.dim, bottleneck, placement, seed)
    decoder = init_decoder(dcfg, seed)
    return SegModel(
        backbone_cfg=bcfg,
        decoder_cfg=dcfg,
        encoder=encoder,
        facts=facts,
        adapters=adapters,
        decoder=decoder,
    )


def encoder_param_count(cfg: BackboneConfig) -> int:
    d = cfg.dim
    gh, gw = cfg.grid_hw
    per_block = 12 * d * d + 9 * d
    return d * cfg.patch * cfg.patch + d + gh * gw * d + cfg.depth * per_block


def count_params(model: SegModel) -> dict:
    """Closed-form group counts, cross-checked against the live registry."""
    bcfg, dcfg = model.backbone_cfg, model.decoder_cfg
    groups = {"encoder": encoder_param_count(bcfg), "fact": 0, "adapter": 0}
    if model.facts is not None:
        groups["fact"] = fact_param_count(bcfg.dim, model.facts.rank, bcfg.depth)
    if model.adapters is not None:
        sites = len(model.adapters.table)
        bottleneck = next(iter(model.adapters.table.values())).bottleneck
        groups["adapter"] = adapter_param_count(bcfg.dim, bottleneck, sites)
    groups["decoder"] = decoder_param_count(dcfg)

    registry = model.named_params()
    total = sum(t.size for t in registry.values())
    trainable = sum(t.size for t in registry.values() if t.requires_grad)
    expected_total = sum(groups.values())
    expected_trainable = groups["fact"] + groups["adapter"] + groups["decoder"]
    if total != expected_total or trainable != expected_trainable:
        raise ContractError(
            "parameter registry disagrees with closed form: "
            f"total {total} vs {expected_total}, trainable {trainable} vs {expected_trainable}"
        )
    return {
        "total": total,
        "trainable": trainable,
        "frozen": total - trainable,
        "ratio": trainable / total,
        "groups": groups,
    }


def predict_volume(
    model: SegModel,
    volume: np.ndarray,
    prompt: PromptSpec | None = None,
    chunk: int = 8,
) -> np.ndarray:
    """Sliding-stack inference over a preprocessed volume [D, H, W].

    Every slice is predicted once per stack that contains it (as center
    or neighbor); per-slice logits are averaged over all covering
    stacks, upsampled to the input plane, and argmaxed.
    """
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ShapeError(f"expected volume [D, H, W], got {vol.shape}")
    d, h, w = vol.shape
    if (h, w) != model.backbone_cfg.input_hw:
        raise ShapeError(
            f"volume plane {(h, w)} != model input {model.backbone_cfg.input_hw}; resize first"
        )
    n = model.backbone_cfg.slices
    half = n // 2
    k = model.decoder_cfg.num_classes
    oh, ow = model.output_hw
    if model.decoder_cfg.prompt_mode != "off" and prompt is None:
        prompt = PromptSpec(box=(0, 0, 0, d - 1, h - 1, w - 1), enabled=False)

    acc = np.zeros((d, k, oh, ow), dtype=np.float64)
    cover = np.zeros(d, dtype=np.int64)
    offsets = np.arange(-half, half + 1)
    with no_grad():
        for start in range(0, d, chunk):
            centers = np.arange(start, min(start + chunk, d))
            z_idx = np.clip(centers[:, None] + offsets[None, :], 0, d - 1)
            stacks = vol[z_idx]  # [B, N, H, W]
            ptoks = None
            if model.decoder_cfg.prompt_mode != "off":
                ptoks = build_prompt_tokens(
                    model.decoder.prompt,
                    [prompt] * len(centers),
                    z_idx,
                    (h, w),
                    model.backbone_cfg.dim,
                )
            logits = model.forward(stacks, prompt_tokens=ptoks)
            data = logits.data.reshape(len(centers), n, k, oh, ow)
            for bi in range(len(centers)):
                for ni in range(n):
                    z = int(z_idx[bi, ni])
                    acc[z] += data[bi, ni]
                    cover[z] += 1
    acc /= cover[:, None, None, None]
    up = bilinear_resize_2d(acc, (h, w))
    return np.argmax(up, axis=1).astype(np.int64)
