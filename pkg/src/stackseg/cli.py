"""Command-line entry points.

Subcommands cover the whole workflow: synthesize data, train, evaluate,
predict single volumes, sweep ablation axes, and report parameter
budgets. Exit codes: 0 success, 2 usage or configuration problem,
3 file or format problem, 4 violated runtime contract.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import PRESETS
from .config import RunConfig, parse_config, parse_config_file, synth_spec_from_config
from .data.synth import generate_dataset
from .data.volume_io import VolumeRecord, read_volume, write_volume
from .data.preprocess import nearest_resize_2d, preprocess_volume, resize_axial
from .decoder import PromptSpec, relax_box
from .errors import ConfigError, ContractError, FormatError, GenerationError, ShapeError
from .model import build_model, count_params, predict_volume
from .train.checkpoint import load_checkpoint, load_into
from .train.evaluate import evaluate_model, render_table, report_rows
from .train.loop import METRICS_HEADER, load_split, train

log = logging.getLogger("stackseg")

ABLATION_AXES = ("decoder", "rank", "placement", "backbone", "components")
RANK_GRID = (4, 8, 16, 32, 64)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="run configuration file (key = value lines)")
    sp.add_argument("--seed", type=int, help="override the configured seed")
    sp.add_argument("--out", help="output path (meaning depends on the subcommand)")


def _load_config(args) -> RunConfig:
    cfg = parse_config_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _config_from_checkpoint(ckpt) -> RunConfig:
    if not ckpt.config_text:
        raise ContractError("checkpoint carries no configuration text")
    return parse_config(ckpt.config_text)


def _build_trained(ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    cfg = _config_from_checkpoint(ckpt)
    from .train.loop import build_from_config

    model = build_from_config(cfg)
    load_into(model.named_params(), ckpt)
    return model, cfg, ckpt


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out) if args.out else Path("data/synth")
    spec = synth_spec_from_config(cfg)
    manifest = generate_dataset(spec, cfg.synth_count, out_dir, seed=cfg.seed)
    print(f"wrote {cfg.synth_count} volumes, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    result = train(cfg)
    print(f"final checkpoint {result.final_ckpt}")
    print(f"best checkpoint {result.best_ckpt}")
    print(f"metrics {result.metrics_csv}")
    if result.best_dice is not None:
        print(f"best val dice {result.best_dice:.2f}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, ckpt = _build_trained(args.ckpt)
    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise ConfigError("no manifest: config has none and --manifest not given")
    vols = load_split(manifest, args.split, cfg.input_size)
    if not vols:
        raise ConfigError(f"split {args.split!r} of {manifest} is empty")
    report = evaluate_model(model, vols, cfg.num_classes, prompt=args.prompt, relax=cfg.prompt_relax)
    print(render_table(report))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}.csv"
    rows = report_rows(report, step=ckpt.step, split=args.split)
    out.write_text(METRICS_HEADER + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    print(f"metrics {out}")
    return 0


def _parse_box(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 6:
        raise ConfigError(f"--box needs z0,y0,x0,z1,y1,x1, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--box values must be integers, got {text!r}")


def cmd_predict(args) -> int:
    model, cfg, _ = _build_trained(args.ckpt)
    rec = read_volume(args.volume)
    vox = preprocess_volume(rec.voxels, rec.modality)
    orig_hw = vox.shape[1:]
    need = (cfg.input_size, cfg.input_size)
    if orig_hw != need:
        vox, _ = resize_axial(vox, need)

    prompt = None
    if model.decoder_cfg.prompt_mode != "off":
        if args.box:
            box = _parse_box(args.box)
            if orig_hw != need:
                sy, sx = (need[0] - 1) / max(1, orig_hw[0] - 1), (need[1] - 1) / max(1, orig_hw[1] - 1)
                z0, y0, x0, z1, y1, x1 = box
                box = (z0, round(y0 * sy), round(x0 * sx), z1, round(y1 * sy), round(x1 * sx))
            prompt = PromptSpec(box=box)
        elif args.box_from_labels:
            if rec.labels is None:
                raise ConfigError("--box-from-labels: the volume has no labels")
            from .data.synth import tight_box

            labels = rec.labels
            if orig_hw != need:
                labels = nearest_resize_2d(labels, need)
            box = tight_box(labels)
            if box is None:
                raise ConfigError("--box-from-labels: labels are empty")
            prompt = PromptSpec(box=box)
        if prompt is not None and args.relax > 0:
            prompt = relax_box(PromptSpec(box=prompt.box, relax=args.relax), vox.shape)

    pred = predict_volume(model, vox, prompt=prompt)
    if orig_hw != (pred.shape[1], pred.shape[2]):
        pred = nearest_resize_2d(pred, orig_hw)
    out = Path(args.out) if args.out else Path(args.volume).with_suffix(".pred.vol")
    write_volume(out, VolumeRecord(voxels=pred.astype(np.uint8), spacing=rec.spacing, modality=rec.modality))
    print(f"prediction {out}")
    return 0


def _ablation_grid(axis: str, cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis == "decoder":
        return [(v, replace(cfg, decoder_variant=v)) for v in ("original", "progressive", "multiscale")]
    if axis == "rank":
        dim = PRESETS[cfg.backbone][1]
        return [(str(r), replace(cfg, fact_rank=r)) for r in RANK_GRID if r < dim]
    if axis == "placement":
        return [(v, replace(cfg, adapter_placement=v)) for v in ("before", "after", "both")]
    if axis == "backbone":
        return [(v, replace(cfg, backbone=v)) for v in ("vitB-like", "vitL-like", "vitH-like")]
    if axis == "components":
        return [(v, replace(cfg, components=v)) for v in ("none", "fact", "adapters", "both")]
    raise ConfigError(f"unknown ablation axis {axis!r}; options: {ABLATION_AXES}")


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if not cfg.manifest:
        raise ConfigError("data.manifest is not set")
    grid = _ablation_grid(args.axis, cfg)
    out = Path(args.out) if args.out else Path(f"ablate_{args.axis}.csv")
    base_out = Path(cfg.out_dir)
    prompt = "auto" if cfg.prompt_mode == "off" else "tight"

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["axis", "value", "dice", "trainable_params", "wall_time_s"])
    for value, variant_cfg in grid:
        variant_cfg = replace(variant_cfg, out_dir=str(base_out / args.axis / value))
        t0 = time.monotonic()
        result = train(variant_cfg)
        wall = time.monotonic() - t0
        model, _, _ = _build_trained(result.final_ckpt)
        vols = load_split(variant_cfg.manifest, "test", variant_cfg.input_size)
        report = evaluate_model(model, vols, variant_cfg.num_classes, prompt=prompt, relax=variant_cfg.prompt_relax)
        trainable = count_params(model)["trainable"]
        writer.writerow([args.axis, value, f"{report.averages['dice']:.2f}", trainable, f"{wall:.1f}"])
        log.info("ablate %s=%s dice %.2f (%.1fs)", args.axis, value, report.averages["dice"], wall)
    out.write_text(buf.getvalue(), encoding="utf-8")
    print(f"ablation table {out}")
    return 0


def cmd_param_count(args) -> int:
    cfg = _load_config(args)
    from .train.loop import build_from_config

    model = build_from_config(cfg)
    counts = count_params(model)
    groups = counts["groups"]
    trainable_by_group = {
        "encoder": 0,
        "fact": groups["fact"],
        "adapter": groups["adapter"],
        "decoder": groups["decoder"],
    }
    lines = ["group,parameters,trainable"]
    for name in ("encoder", "fact", "adapter", "decoder"):
        lines.append(f"{name},{groups[name]},{trainable_by_group[name]}")
    lines.append(f"total,{counts['total']},{counts['trainable']}")
    print("\n".join(lines))
    frozen = counts["frozen"]
    print(f"trainable share: {counts['trainable']}/{frozen} frozen = {100.0 * counts['trainable'] / frozen:.2f}%")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("synth-gen", help="generate a synthetic dataset and manifest")
    _add_common(sp)
    sp.set_defaults(fn=cmd_synth_gen)

    sp = sub.add_parser("train", help="train a model from a run configuration")
    _add_common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    sp.add_argument("--split", default="test", help="manifest split (default test)")
    sp.add_argument("--manifest", help="override the manifest recorded in the checkpoint")
    sp.add_argument("--prompt", default="auto", choices=("auto", "tight", "relaxed"))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("predict", help="segment one volume and write the labels")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--volume", required=True, help="input volume file")
    sp.add_argument("--box", help="prompt box z0,y0,x0,z1,y1,x1 in volume coordinates")
    sp.add_argument("--box-from-labels", action="store_true", help="derive the box from stored labels")
    sp.add_argument("--relax", type=float, default=0.0, help="pad the box by this fraction per side")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("ablate", help="train and score every value along one axis")
    _add_common(sp)
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("param-count", help="report parameter budgets by group")
    _add_common(sp)
    sp.set_defaults(fn=cmd_param_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ShapeError, ContractError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
