"""Grouping adjacent slices into fixed-depth stacks.

A stack of N slices centered on z collects z-N//2 .. z+N//2, clamping
at the volume boundary so edge slices repeat their nearest neighbor.
Stacks are merged batch-first downstream: element b*N + n is slice n of
stack b.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class SliceStackBatch:
    images: np.ndarray  # [B, N, H, W] float32
    labels: np.ndarray | None  # [B, N, H, W] integer
    z_indices: np.ndarray  # [B, N] global slice indices after clamping

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [B, N, H, W], got {self.images.shape}")
        if self.labels is not None and self.labels.shape != self.images.shape:
            raise ShapeError(
                f"labels {self.labels.shape} do not match images {self.images.shape}"
            )
        if self.z_indices.shape != self.images.shape[:2]:
            raise ShapeError(
                f"z_indices {self.z_indices.shape} do not match batch {self.images.shape[:2]}"
            )

    @property
    def batch(self) -> int:
        return self.images.shape[0]

    @property
    def slices(self) -> int:
        return self.images.shape[1]


def check_stack_depth(slices: int, volume_depth: int) -> None:
    if slices < 1 or slices % 2 == 0:
        raise ConfigError(f"stack depth must be odd and >= 1, got {slices}")
    if slices > 2 * volume_depth - 1:
        raise ConfigError(
            f"stack depth {slices} exceeds what a {volume_depth}-slice volume can fill "
            f"(limit {2 * volume_depth - 1})"
        )


def stack_slices(
    volume: np.ndarray,
    labels: np.ndarray | None,
    slices: int,
    centers: np.ndarray,
) -> SliceStackBatch:
    """Gather stacks around the given center indices, [B, N, H, W]."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"expected volume [D, H, W], got {vol.shape}")
    d = vol.shape[0]
    check_stack_depth(slices, d)
    centers = np.asarray(centers, dtype=np.int64)
    if centers.ndim != 1:
        raise ShapeError(f"centers must be 1-D, got {centers.shape}")
    if centers.size and (centers.min() < 0 or centers.max() >= d):
        raise ShapeError(f"center indices out of range for depth {d}")
    half = slices // 2
    offsets = np.arange(-half, half + 1)
    z = np.clip(centers[:, None] + offsets[None, :], 0, d - 1)
    images = vol[z].astype(np.float32)
    lab = None
    if labels is not None:
        lab_arr = np.asarray(labels)
        if lab_arr.shape != vol.shape:
            raise ShapeError(f"labels {lab_arr.shape} do not match volume {vol.shape}")
        lab = lab_arr[z]
    return SliceStackBatch(images=images, labels=lab, z_indices=z)


def unstack_centers(arr: np.ndarray) -> np.ndarray:
    """Pull the center slice out of [B, N, ...]."""
    if arr.ndim < 2:
        raise ShapeError(f"expected at least [B, N], got {arr.shape}")
    return arr[:, arr.shape[1] // 2]
