"""Whole-volume evaluation: per-class overlap and surface metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import SegModel, predict_volume
from .loop import LoadedVolume, volume_prompt
from .metrics import dice, format_metric, hausdorff, miou, nsd


@dataclass
class EvalReport:
    per_class: dict  # class -> {"dice": float, "hausdorff": float, "nsd": float}
    averages: dict  # metric -> mean over classes (NaN-skipping for distances)
    miou: float
    volumes: int


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    defined = arr[~np.isnan(arr)]
    return float(defined.mean()) if len(defined) else float("nan")


def evaluate_model(
    model: SegModel,
    vols: list[LoadedVolume],
    num_classes: int,
    prompt: str = "auto",
    relax: float = 0.05,
) -> EvalReport:
    """prompt: "auto" (no box), "tight", or "relaxed" by `relax`."""
    per_class = {c: {"dice": [], "hausdorff": [], "nsd": []} for c in range(1, num_classes)}
    miou_values = []
    for vol in vols:
        spec = None
        if model.decoder_cfg.prompt_mode != "off":
            spec = volume_prompt(vol.labels, vol.voxels.shape, prompt, relax)
        pred = predict_volume(model, vol.voxels, prompt=spec)
        miou_values.append(miou(pred, vol.labels, num_classes))
        for c in range(1, num_classes):
            pc, gc = pred == c, vol.labels == c
            per_class[c]["dice"].append(dice(pc, gc))
            per_class[c]["hausdorff"].append(hausdorff(pc, gc, vol.spacing))
            per_class[c]["nsd"].append(nsd(pc, gc, vol.spacing))
    summary = {
        c: {
            "dice": float(np.mean(m["dice"])),
            "hausdorff": _nanmean(m["hausdorff"]),
            "nsd": float(np.mean(m["nsd"])),
        }
        for c, m in per_class.items()
    }
    averages = {
        "dice": float(np.mean([s["dice"] for s in summary.values()])),
        "hausdorff": _nanmean([s["hausdorff"] for s in summary.values()]),
        "nsd": float(np.mean([s["nsd"] for s in summary.values()])),
    }
    return EvalReport(summary, averages, _nanmean(miou_values), len(vols))


def report_rows(report: EvalReport, step: int, split: str) -> list[str]:
    """CSV rows in the shared step,split,metric,class,value layout."""
    rows = []
    for c, values in report.per_class.items():
        for metric, value in values.items():
            rows.append(f"{step},{split},{metric},{c},{format_metric(value)}")
    for metric, value in report.averages.items():
        rows.append(f"{step},{split},{metric},mean,{format_metric(value)}")
    rows.append(f"{step},{split},miou,all,{format_metric(report.miou)}")
    return rows


def render_table(report: EvalReport) -> str:
    """Fixed-width table: one row per class, then the average row."""
    header = f"{'Class':>8} {'Dice':>8} {'HD95mm':>8} {'NSD':>8}"
    lines = [header, "-" * len(header)]

    def fmt(value: float) -> str:
        return "undef" if isinstance(value, float) and np.isnan(value) else f"{value:.2f}"

    for c, v in report.per_class.items():
        lines.append(f"{c:>8} {fmt(v['dice']):>8} {fmt(v['hausdorff']):>8} {fmt(v['nsd']):>8}")
    a = report.averages
    lines.append(f"{'Average':>8} {fmt(a['dice']):>8} {fmt(a['hausdorff']):>8} {fmt(a['nsd']):>8}")
    lines.append(f"mIoU {fmt(report.miou)} over {report.volumes} volumes")
    return "\n".join(lines)
