"""Modality-specific intensity normalization and in-plane resampling.

The bounded normalizations (mri, video) are exactly idempotent: running
them on their own output is a bit-level no-op. The mri ceiling uses the
99th percentile with the ``higher`` method so the cutoff is an actual
data value; after clipping, at least 1% of voxels sit at the maximum,
which pins the second pass's percentile to 1.0.
"""
from __future__ import annotations

import logging

import numpy as np

from ..errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

CT_WINDOW = (-200.0, 250.0)
_EPS = 1e-6


def _znorm(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if sd < _EPS:
        log.warning("constant volume, z-normalization yields zeros")
        return np.zeros_like(x, dtype=np.float32)
    return ((x - mu) / sd).astype(np.float32)


def _unit_range(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo < _EPS:
        log.warning("constant volume, range normalization yields zeros")
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def preprocess_volume(
    voxels: np.ndarray,
    modality: str,
    ct_window: tuple[float, float] = CT_WINDOW,
) -> np.ndarray:
    """Normalize raw intensities to a training-friendly float32 volume.

    ct: clamp to the window, then z-normalize.
    mri: clip above the 99th percentile, then map to [0, 1].
    video: map to [0, 1].
    synthetic: z-normalize.
    """
    v = np.asarray(voxels)
    if v.ndim != 3:
        raise ShapeError(f"expected volume [D, H, W], got {v.shape}")
    if modality == "ct":
        lo, hi = ct_window
        if hi <= lo:
            raise ConfigError(f"bad ct window {ct_window}")
        return _znorm(np.clip(v.astype(np.float64), lo, hi))
    if modality == "mri":
        x = v.astype(np.float64)
        ceiling = np.percentile(x, 99, method="higher")
        return _unit_range(np.minimum(x, ceiling))
    if modality == "video":
        return _unit_range(v)
    if modality == "synthetic":
        return _znorm(v)
    raise ConfigError(f"unknown modality {modality!r}")


def bilinear_resize_2d(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear over the last two axes, float64 math."""
    h, w = arr.shape[-2], arr.shape[-1]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr.astype(np.float64)
    ys = np.linspace(0.0, h - 1.0, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, ow) if ow > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    a = arr.astype(np.float64)
    top = a[..., y0, :][..., :, x0] * (1 - fx) + a[..., y0, :][..., :, x1] * fx
    bot = a[..., y1, :][..., :, x0] * (1 - fx) + a[..., y1, :][..., :, x1] * fx
    return top * (1 - fy) + bot * fy


def nearest_resize_2d(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners nearest neighbor over the last two axes."""
    h, w = arr.shape[-2], arr.shape[-1]
    oh, ow = out_hw
    ys = np.rint(np.linspace(0.0, h - 1.0, oh)).astype(int) if oh > 1 else np.zeros(1, int)
    xs = np.rint(np.linspace(0.0, w - 1.0, ow)).astype(int) if ow > 1 else np.zeros(1, int)
    return arr[..., ys, :][..., :, xs]


def resize_axial(
    volume: np.ndarray,
    out_hw: tuple[int, int],
    labels: np.ndarray | None = None,
    multiple: int = 16,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Resample every axial slice to ``out_hw``.

    Intensities are interpolated bilinearly, labels by nearest neighbor.
    The target plane must be divisible by the patch size so the encoder
    can tile it.
    """
    oh, ow = out_hw
    if oh % multiple or ow % multiple:
        raise ConfigError(f"target plane {out_hw} not divisible by {multiple}")
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ShapeError(f"expected volume [D, H, W], got {v.shape}")
    out_v = bilinear_resize_2d(v, out_hw).astype(np.float32)
    out_l = None
    if labels is not None:
        lab = np.asarray(labels)
        if lab.shape != v.shape:
            raise ShapeError(f"labels {lab.shape} do not match volume {v.shape}")
        out_l = nearest_resize_2d(lab, out_hw)
    return out_v, out_l
