"""Flat `key = value` run configuration with dotted keys.

One dataclass holds every knob for a run: model shape, adaptation
settings, loss weights, schedule, data paths, and synthetic-generator
parameters. The text format is a plain line-per-setting file with `#`
comments; parse -> emit -> parse is lossless and unknown keys are
rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PROMPT_MODES = ("off", "tight", "relaxed")


@dataclass
class RunConfig:
    backbone: str = "vitH-like"
    input_size: int = 64
    slices: int = 5
    num_classes: int = 3
    components: str = "both"
    fact_rank: int = 4
    adapter_placement: str = "both"
    adapter_bottleneck: int = 4
    decoder_variant: str = "progressive"
    prompt_mode: str = "off"
    prompt_relax: float = 0.05
    loss_alpha: float = 0.2
    loss_beta: float = 0.8
    loss_eps: float = 1e-5
    peak_lr: float = 2e-3
    warmup_steps: int = 25
    decay_rate: float = 0.998
    steps: int = 300
    batch: int = 8
    val_every: int = 50
    manifest: str = ""
    out_dir: str = "runs/latest"
    seed: int = 0
    synth_kind: str = "cross_slice_shapes"
    synth_shape: str = "16,64,64"
    synth_count: int = 50
    synth_objects: str = "3,5"
    synth_radius: str = "2.0,4.5"
    synth_contrast: float = 1.0
    synth_noise: float = 0.3

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt.mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.steps < 0:
            raise ConfigError(f"schedule.steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")
        if self.val_every < 1:
            raise ConfigError(f"train.val_every must be >= 1, got {self.val_every}")
        if self.prompt_relax < 0:
            raise ConfigError(f"prompt.relax must be >= 0, got {self.prompt_relax}")
        if self.loss_alpha < 0 or self.loss_beta < 0:
            raise ConfigError("loss weights must be >= 0")


# file key -> dataclass field, in canonical emit order
KEY_TO_FIELD = {
    "backbone": "backbone",
    "input_size": "input_size",
    "slices": "slices",
    "num_classes": "num_classes",
    "components": "components",
    "fact.rank": "fact_rank",
    "adapter.placement": "adapter_placement",
    "adapter.bottleneck": "adapter_bottleneck",
    "decoder.variant": "decoder_variant",
    "prompt.mode": "prompt_mode",
    "prompt.relax": "prompt_relax",
    "loss.alpha": "loss_alpha",
    "loss.beta": "loss_beta",
    "loss.eps": "loss_eps",
    "schedule.peak_lr": "peak_lr",
    "schedule.warmup": "warmup_steps",
    "schedule.decay": "decay_rate",
    "schedule.steps": "steps",
    "train.batch": "batch",
    "train.val_every": "val_every",
    "data.manifest": "manifest",
    "out_dir": "out_dir",
    "seed": "seed",
    "synth.kind": "synth_kind",
    "synth.shape": "synth_shape",
    "synth.count": "synth_count",
    "synth.objects": "synth_objects",
    "synth.radius": "synth_radius",
    "synth.contrast": "synth_contrast",
    "synth.noise": "synth_noise",
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}")


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = KEY_TO_FIELD[key]
        if field_name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[field_name] = _coerce(key, field_name, raw)
    return RunConfig(**values)


def parse_config_file(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for key, field_name in KEY_TO_FIELD.items():
        value = getattr(cfg, field_name)
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _int_pair(key: str, raw: str) -> tuple[int, int]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated values, got {raw!r}")
    return (int(parts[0]), int(parts[1]))


def _float_pair(key: str, raw: str) -> tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated values, got {raw!r}")
    return (float(parts[0]), float(parts[1]))


def synth_spec_from_config(cfg: RunConfig):
    from .data.synth import SynthSpec

    parts = [p.strip() for p in cfg.synth_shape.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"synth.shape: expected D,H,W, got {cfg.synth_shape!r}")
    try:
        shape = tuple(int(p) for p in parts)
        objects = _int_pair("synth.objects", cfg.synth_objects)
        radius = _float_pair("synth.radius", cfg.synth_radius)
    except ValueError as e:
        raise ConfigError(f"bad synth value: {e}")
    return SynthSpec(
        kind=cfg.synth_kind,
        shape=shape,
        num_objects=objects,
        radius_range=radius,
        contrast=cfg.synth_contrast,
        noise_sigma=cfg.synth_noise,
    )
