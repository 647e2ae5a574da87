"""Stack-level data augmentation.

Geometric transforms are drawn once per stack and applied identically
to every slice in it (and to the labels, with nearest resampling);
anything else would decorrelate the depth axis the model is supposed to
exploit. Photometric transforms touch intensities only. All randomness
comes from per-stack substreams of a single seed, so a batch augments
the same way no matter how it is chunked or ordered.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from .. import rng
from ..errors import ShapeError
from .stacking import SliceStackBatch

MAX_ROTATE_DEG = 15.0
MAX_SHEAR_DEG = 5.0
SCALE_RANGE = (0.9, 1.1)
MAX_TRANSLATE_FRAC = 0.1
MAX_ERASE_AREA = 0.10


def affine_inverse_map(
    angle_deg: float,
    scale: float,
    shear_deg: float,
    ty: float,
    tx: float,
    hw: tuple[int, int],
) -> np.ndarray:
    """3x3 matrix taking output (y, x, 1) to input coordinates.

    The forward transform rotates, shears, and scales about the image
    center, then translates; we warp by the inverse.
    """
    h, w = hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    sh = np.tan(np.deg2rad(shear_deg))
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, 0.0], [sh, 1.0]])
    a = rot @ shear * scale
    fwd = np.eye(3)
    fwd[:2, :2] = a
    fwd[:2, 2] = [cy + ty, cx + tx] - a @ [cy, cx]
    return np.linalg.inv(fwd)


def warp_stack(stack: np.ndarray, inv: np.ndarray, nearest: bool = False) -> np.ndarray:
    """Resample [N, H, W] through an output->input map, zeros outside."""
    n, h, w = stack.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = inv[0, 0] * ys + inv[0, 1] * xs + inv[0, 2]
    sx = inv[1, 0] * ys + inv[1, 1] * xs + inv[1, 2]
    if nearest:
        iy = np.rint(sy).astype(int)
        ix = np.rint(sx).astype(int)
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(stack)
        out[:, ok] = stack[:, iy[ok], ix[ok]]
        return out
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((n, h, w), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros((n, h, w), dtype=np.float64)
            vals[:, ok] = stack[:, yy[ok], xx[ok]]
            out += wgt * vals
    return out.astype(stack.dtype if stack.dtype.kind == "f" else np.float64)


def posterize(stack: np.ndarray, levels: int) -> np.ndarray:
    """Quantize to the given number of levels over the stack's range."""
    lo, hi = float(stack.min()), float(stack.max())
    if hi - lo < 1e-12 or levels < 2:
        return stack.copy()
    t = (stack - lo) / (hi - lo)
    q = np.rint(t * (levels - 1)) / (levels - 1)
    return (q * (hi - lo) + lo).astype(stack.dtype)


def adjust_contrast(stack: np.ndarray, factor: float) -> np.ndarray:
    mu = float(stack.mean())
    return (mu + factor * (stack - mu)).astype(stack.dtype)


def adjust_brightness(stack: np.ndarray, delta_frac: float) -> np.ndarray:
    span = float(stack.max() - stack.min())
    return (stack + delta_frac * span).astype(stack.dtype)


def sharpen(stack: np.ndarray, amount: float) -> np.ndarray:
    """Unsharp mask against a 3x3 in-plane box blur."""
    blur = uniform_filter(stack.astype(np.float64), size=(1, 3, 3), mode="nearest")
    return (stack + amount * (stack - blur)).astype(stack.dtype)


def erase(stack: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    y0, x0, eh, ew = rect
    out = stack.copy()
    out[:, y0 : y0 + eh, x0 : x0 + ew] = 0.0
    return out


def _draw_transform(g: np.random.Generator, hw: tuple[int, int]) -> dict:
    """All parameters are drawn unconditionally, in a fixed order, so the
    stream stays aligned regardless of which transforms end up applied."""
    h, w = hw
    t = {
        "flip_lr": bool(g.random() < 0.5),
        "flip_ud": bool(g.random() < 0.5),
        "angle": float(g.uniform(-MAX_ROTATE_DEG, MAX_ROTATE_DEG)),
        "scale": float(g.uniform(*SCALE_RANGE)),
        "shear": float(g.uniform(-MAX_SHEAR_DEG, MAX_SHEAR_DEG)),
        "ty": float(g.uniform(-MAX_TRANSLATE_FRAC, MAX_TRANSLATE_FRAC) * h),
        "tx": float(g.uniform(-MAX_TRANSLATE_FRAC, MAX_TRANSLATE_FRAC) * w),
        "contrast": float(g.uniform(0.8, 1.2)) if g.random() < 0.5 else None,
        "brightness": float(g.uniform(-0.1, 0.1)) if g.random() < 0.5 else None,
        "sharpen": float(g.uniform(0.1, 0.5)) if g.random() < 0.3 else None,
        "posterize": int(g.integers(4, 9)) if g.random() < 0.3 else None,
    }
    eh = max(1, int(round(float(g.uniform(0.05, 0.31)) * h)))
    ew = max(1, int(round(float(g.uniform(0.05, 0.31)) * w)))
    ew = min(ew, max(1, int(MAX_ERASE_AREA * h * w / eh)))
    y0 = int(g.integers(0, h - eh + 1))
    x0 = int(g.integers(0, w - ew + 1))
    t["erase"] = (y0, x0, eh, ew) if g.random() < 0.5 else None
    t["matrix_inv"] = affine_inverse_map(t["angle"], t["scale"], t["shear"], t["ty"], t["tx"], hw)
    return t


def _apply(images: np.ndarray, labels: np.ndarray | None, t: dict):
    if t["flip_lr"]:
        images = np.flip(images, axis=2)
        labels = np.flip(labels, axis=2) if labels is not None else None
    if t["flip_ud"]:
        images = np.flip(images, axis=1)
        labels = np.flip(labels, axis=1) if labels is not None else None
    images = warp_stack(np.ascontiguousarray(images), t["matrix_inv"]).astype(np.float32)
    if labels is not None:
        labels = warp_stack(np.ascontiguousarray(labels), t["matrix_inv"], nearest=True)
    if t["contrast"] is not None:
        images = adjust_contrast(images, t["contrast"])
    if t["brightness"] is not None:
        images = adjust_brightness(images, t["brightness"])
    if t["sharpen"] is not None:
        images = sharpen(images, t["sharpen"])
    if t["posterize"] is not None:
        images = posterize(images, t["posterize"])
    if t["erase"] is not None:
        images = erase(images, t["erase"])
    return images, labels


def augment(
    batch: SliceStackBatch, seed: int, return_transforms: bool = False
):
    """Randomly transform each stack in the batch, independently.

    Returns a new batch (z indices pass through untouched); with
    return_transforms the per-stack parameter dicts come along too.
    """
    b, n, h, w = batch.images.shape
    out_images = np.empty_like(batch.images)
    out_labels = None if batch.labels is None else np.empty_like(batch.labels)
    transforms = []
    for i in range(b):
        g = rng.stream(seed, f"stack/{i}")
        t = _draw_transform(g, (h, w))
        transforms.append(t)
        img, lab = _apply(
            batch.images[i],
            None if batch.labels is None else batch.labels[i],
            t,
        )
        out_images[i] = img
        if out_labels is not None:
            out_labels[i] = lab
    out = SliceStackBatch(images=out_images, labels=out_labels, z_indices=batch.z_indices.copy())
    return (out, transforms) if return_transforms else out
