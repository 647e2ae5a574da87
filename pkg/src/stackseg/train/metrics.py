"""Segmentation metrics over integer label volumes.

Distances use surface voxels: mask voxels with at least one of their
six face neighbors outside the mask, where everything beyond the volume
border counts as outside. Conventions for empty masks follow the module
contracts: dice(empty, empty) = 100, hausdorff of an empty mask is NaN
(rendered "undefined" downstream), nsd(empty, empty) = 100 and 0 when
only one side is empty.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ContractError


def _as_bool(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap of two binary masks as a percentage."""
    _check_pair(pred, gt)
    p, g = _as_bool(pred), _as_bool(gt)
    ps, gs = int(p.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        return 100.0
    return 200.0 * int(np.logical_and(p, g).sum()) / (ps + gs)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates [n, 3] of mask voxels with an exposed face."""
    m = _as_bool(mask)
    if m.ndim != 3:
        raise ContractError(f"expected a 3D mask, got shape {m.shape}")
    padded = np.pad(m, 1)
    enclosed = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(m & ~enclosed)


def _surface_mm(mask: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or (sp <= 0).any():
        raise ContractError(f"spacing must be 3 positive floats, got {spacing}")
    return surface_voxels(mask) * sp


def hausdorff(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), percentile: float = 95.0) -> float:
    """Percentile symmetric surface distance in mm; NaN if a side is empty."""
    _check_pair(pred, gt)
    sp = _surface_mm(pred, spacing)
    sg = _surface_mm(gt, spacing)
    if len(sp) == 0 or len(sg) == 0:
        return float("nan")
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), percentile))


def nsd(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), tau: float | None = None) -> float:
    """Fraction of each surface within tau of the other, averaged, as %."""
    _check_pair(pred, gt)
    if tau is None:
        tau = float(max(spacing))
    sp = _surface_mm(pred, spacing)
    sg = _surface_mm(gt, spacing)
    if len(sp) == 0 and len(sg) == 0:
        return 100.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    close = int((d_pg <= tau).sum()) + int((d_gp <= tau).sum())
    return 100.0 * close / (len(sp) + len(sg))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in either map, as a percentage."""
    _check_pair(pred, gt)
    p = np.asarray(pred)
    g = np.asarray(gt)
    ious = []
    for k in range(num_classes):
        pk = p == k
        gk = g == k
        union = int(np.logical_or(pk, gk).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(pk, gk).sum()) / union)
    if not ious:
        return 100.0
    return 100.0 * float(np.mean(ious))


def format_metric(value: float) -> str:
    """CSV rendering; NaN becomes the explicit "undefined" sentinel."""
    if isinstance(value, float) and np.isnan(value):
        return "undefined"
    return f"{value:.6g}"
