"""Deterministic training loop.

All randomness is drawn from stateless streams keyed by the run seed
and the step number, so a run is reproducible from its config alone and
two runs with the same seed produce byte-identical checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import RunConfig, emit_config
from ..data.augment import augment
from ..data.preprocess import preprocess_volume, resize_axial
from ..data.stacking import SliceStackBatch, stack_slices
from ..data.synth import tight_box
from ..data.volume_io import read_manifest, read_volume
from ..decoder import PromptSpec, build_prompt_tokens, relax_box
from ..errors import ConfigError, ContractError
from ..model import SegModel, build_model, predict_volume
from ..rng import derive_seed, stream
from .checkpoint import save_checkpoint
from .loss import hybrid_loss
from .metrics import dice, format_metric
from .optim import clear_grads, init_adam, opt_step
from .schedule import ScheduleConfig, lr_at

log = logging.getLogger(__name__)

METRICS_HEADER = "step,split,metric,class,value"


@dataclass
class LoadedVolume:
    voxels: np.ndarray  # preprocessed float32 [D, H, W]
    labels: np.ndarray | None
    spacing: tuple


@dataclass
class TrainResult:
    final_ckpt: Path
    best_ckpt: Path
    metrics_csv: Path
    best_dice: float | None
    steps: int


def build_from_config(cfg: RunConfig) -> SegModel:
    return build_model(
        backbone=cfg.backbone,
        input_size=cfg.input_size,
        slices=cfg.slices,
        num_classes=cfg.num_classes,
        rank=cfg.fact_rank,
        bottleneck=cfg.adapter_bottleneck,
        placement=cfg.adapter_placement,
        components=cfg.components,
        decoder_variant=cfg.decoder_variant,
        prompt_mode="off" if cfg.prompt_mode == "off" else "box",
        seed=cfg.seed,
    )


def load_split(manifest_path, split: str, input_size: int, need_labels: bool = True) -> list[LoadedVolume]:
    splits = read_manifest(Path(manifest_path))
    out = []
    for path in splits.get(split, []):
        rec = read_volume(path)
        if need_labels and rec.labels is None:
            raise ContractError(f"{path}: volume has no labels")
        vox = preprocess_volume(rec.voxels, rec.modality)
        labels = rec.labels
        if vox.shape[1:] != (input_size, input_size):
            vox, labels = resize_axial(vox, (input_size, input_size), labels=labels)
        out.append(LoadedVolume(vox.astype(np.float32), labels, rec.spacing))
    return out


def _sample_batch(vols: list[LoadedVolume], cfg: RunConfig, step: int) -> SliceStackBatch:
    g = stream(cfg.seed, f"batch/{step}")
    images, labels, z_indices = [], [], []
    for _ in range(cfg.batch):
        vol = vols[int(g.integers(0, len(vols)))]
        center = int(g.integers(0, vol.voxels.shape[0]))
        sb = stack_slices(vol.voxels, vol.labels, cfg.slices, [center])
        images.append(sb.images)
        labels.append(sb.labels)
        z_indices.append(sb.z_indices)
    return SliceStackBatch(
        np.concatenate(images), np.concatenate(labels), np.concatenate(z_indices)
    )


def _disabled_spec(shape_zyx) -> PromptSpec:
    d, h, w = shape_zyx
    return PromptSpec(box=(0, 0, 0, d - 1, h - 1, w - 1), enabled=False)


def _stack_prompt_tokens(model: SegModel, batch: SliceStackBatch):
    """Tight boxes from the (augmented) stack labels, in global z."""
    if model.decoder_cfg.prompt_mode == "off":
        return None
    _, n, h, w = batch.images.shape
    specs = []
    for b in range(batch.batch):
        box = tight_box(batch.labels[b])
        if box is None:
            specs.append(_disabled_spec((int(batch.z_indices[b].max()) + 1, h, w)))
            continue
        z0, y0, x0, z1, y1, x1 = box
        z0g = int(batch.z_indices[b, z0])
        z1g = int(batch.z_indices[b, z1])
        specs.append(PromptSpec(box=(z0g, y0, x0, z1g, y1, x1)))
    return build_prompt_tokens(
        model.decoder.prompt, specs, batch.z_indices, (h, w), model.decoder_cfg.dim
    )


def volume_prompt(labels: np.ndarray | None, shape_zyx, mode: str, relax: float) -> PromptSpec:
    """Evaluation-time prompt for a whole volume: tight, relaxed, or none."""
    if mode == "auto" or labels is None:
        return _disabled_spec(shape_zyx)
    box = tight_box(labels)
    if box is None:
        return _disabled_spec(shape_zyx)
    spec = PromptSpec(box=box)
    if mode == "tight":
        return spec
    if mode == "relaxed":
        return relax_box(PromptSpec(box=box, relax=relax), shape_zyx)
    raise ConfigError(f"unknown prompt mode {mode!r}")


def _validate(model: SegModel, vols: list[LoadedVolume], cfg: RunConfig) -> dict:
    """Mean foreground dice per class over a split, plus overall mean."""
    k = cfg.num_classes
    per_class = {c: [] for c in range(1, k)}
    for vol in vols:
        prompt = None
        if model.decoder_cfg.prompt_mode != "off":
            mode = "tight" if cfg.prompt_mode in ("off", "tight") else "relaxed"
            prompt = volume_prompt(vol.labels, vol.voxels.shape, mode, cfg.prompt_relax)
        pred = predict_volume(model, vol.voxels, prompt=prompt)
        for c in range(1, k):
            per_class[c].append(dice(pred == c, vol.labels == c))
    summary = {c: float(np.mean(vals)) for c, vals in per_class.items()}
    summary["mean"] = float(np.mean(list(summary.values())))
    return summary


def train(cfg: RunConfig) -> TrainResult:
    if not cfg.manifest:
        raise ConfigError("data.manifest is not set")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_vols = load_split(cfg.manifest, "train", cfg.input_size)
    if not train_vols:
        raise ConfigError(f"{cfg.manifest}: training split is empty")
    val_vols = load_split(cfg.manifest, "val", cfg.input_size)

    model = build_from_config(cfg)
    params = model.named_params()
    adam = init_adam(model.trainable_params())
    sched = ScheduleConfig(cfg.peak_lr, cfg.warmup_steps, cfg.decay_rate)
    config_text = emit_config(cfg)

    final_path = out_dir / "final.ckpt"
    best_path = out_dir / "best.ckpt"
    metrics_path = out_dir / "metrics.csv"
    best_dice: float | None = None

    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        for step in range(cfg.steps):
            batch = _sample_batch(train_vols, cfg, step)
            batch = augment(batch, derive_seed(cfg.seed, f"aug/{step}"))
            prompt_tokens = _stack_prompt_tokens(model, batch)

            logits = model.forward(batch.images, prompt_tokens)
            merged = batch.labels.reshape(-1, *batch.labels.shape[2:])
            loss = hybrid_loss(logits, merged, cfg.loss_alpha, cfg.loss_beta, cfg.loss_eps)
            loss.backward()
            opt_step(params, adam, lr_at(step, sched))
            clear_grads(params)

            metrics.write(f"{step},train,loss,,{format_metric(loss.item())}\n")

            if val_vols and ((step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps):
                summary = _validate(model, val_vols, cfg)
                for key, value in summary.items():
                    metrics.write(f"{step},val,dice,{key},{format_metric(value)}\n")
                metrics.flush()
                log.info("step %d val dice %.2f", step, summary["mean"])
                if best_dice is None or summary["mean"] >= best_dice:
                    best_dice = summary["mean"]
                    save_checkpoint(best_path, params, config_text, step + 1, adam)

    save_checkpoint(final_path, params, config_text, cfg.steps, adam)
    if best_dice is None:
        save_checkpoint(best_path, params, config_text, cfg.steps, adam)
    return TrainResult(final_path, best_path, metrics_path, best_dice, cfg.steps)
