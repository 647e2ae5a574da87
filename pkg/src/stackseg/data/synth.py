"""Synthetic volumes whose classes are separable in 3D but not in 2D.

``cross_slice_shapes`` places spheres (class 1) and axis-aligned
z-cylinders (class 2) with identical intensity contrast. A cylinder's
cross-section radius is drawn from the same distribution as a randomly
chosen slice through a sphere, and its length matches the sphere's
z-extent distribution, so any single axial slice carries no signal
about the class; telling them apart requires comparing the footprint
across neighboring slices (constant for cylinders, waxing and waning
for spheres).

``low_contrast_blob`` buries one irregular foreground object under
noise at least twice its contrast, for prompt-guided experiments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng
from ..errors import ConfigError, GenerationError, ShapeError
from .volume_io import VolumeRecord, write_manifest, write_volume

KINDS = ("cross_slice_shapes", "low_contrast_blob")


@dataclass
class SynthSpec:
    kind: str = "cross_slice_shapes"
    shape: tuple[int, int, int] = (16, 64, 64)
    num_objects: tuple[int, int] = (3, 5)
    radius_range: tuple[float, float] = (2.0, 4.5)
    contrast: float = 1.0
    noise_sigma: float = 0.3
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown synthetic kind {self.kind!r}; options: {KINDS}")
        lo, hi = self.num_objects
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad object count range {self.num_objects}")
        rlo, rhi = self.radius_range
        if rlo < 1.0 or rhi < rlo:
            raise ConfigError(f"bad radius range {self.radius_range}")
        if self.noise_sigma < 0 or self.contrast <= 0:
            raise ConfigError("noise_sigma must be >= 0 and contrast > 0")

    @property
    def num_classes(self) -> int:
        return 3 if self.kind == "cross_slice_shapes" else 2


def _ball_mask(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    return (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _cylinder_mask(shape, center, r2: float, half_len: int) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r2) & (np.abs(zz - cz) <= half_len)


def _boxes_overlap(a, b) -> bool:
    # 1-voxel gap between bounding boxes keeps objects separable
    return all(a[i] <= b[i + 3] + 1 and b[i] <= a[i + 3] + 1 for i in range(3))


def _place(g, shape, half_extents, taken, tries=100):
    hz, hy, hx = half_extents
    d, h, w = shape
    if 2 * hz >= d or 2 * hy >= h or 2 * hx >= w:
        raise GenerationError(
            f"object with half extents {half_extents} cannot fit in volume {shape}"
        )
    for _ in range(tries):
        cz = int(g.integers(hz, d - hz))
        cy = int(g.integers(hy, h - hy))
        cx = int(g.integers(hx, w - hx))
        box = (cz - hz, cy - hy, cx - hx, cz + hz, cy + hy, cx + hx)
        if not any(_boxes_overlap(box, t) for t in taken):
            taken.append(box)
            return (cz, cy, cx)
    raise GenerationError(f"no room for another object after {tries} placements")


def _gen_cross_slice_shapes(spec: SynthSpec, g) -> tuple[np.ndarray, np.ndarray]:
    d, h, w = spec.shape
    labels = np.zeros(spec.shape, dtype=np.uint8)
    n = int(g.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    # guarantee both classes appear whenever there is room for two
    kinds = [1, 2][:n] + [int(g.integers(1, 3)) for _ in range(max(0, n - 2))]
    kinds = list(g.permutation(np.array(kinds, dtype=np.int64)))
    taken: list[tuple] = []
    for kind in kinds:
        if kind == 1:
            rho = float(g.uniform(*spec.radius_range))
            half = math.floor(rho)
            center = _place(g, spec.shape, (half, half, half), taken)
            mask = _ball_mask(spec.shape, center, rho)
        else:
            # cross-section radius drawn exactly as a random slice of a
            # sphere would produce: rho'^2 - dz^2 at a uniform offset
            rho_xs = float(g.uniform(*spec.radius_range))
            dz = int(g.integers(-math.floor(rho_xs), math.floor(rho_xs) + 1))
            r2 = rho_xs * rho_xs - dz * dz
            rho_len = float(g.uniform(*spec.radius_range))
            half_len = math.floor(rho_len)
            half_plane = math.floor(math.sqrt(r2))
            center = _place(g, spec.shape, (half_len, half_plane, half_plane), taken)
            mask = _cylinder_mask(spec.shape, center, r2, half_len)
        labels[mask] = kind
    voxels = g.normal(0.0, spec.noise_sigma, size=spec.shape)
    voxels[labels > 0] += spec.contrast
    return voxels.astype(np.float32), labels


def _gen_low_contrast_blob(spec: SynthSpec, g) -> tuple[np.ndarray, np.ndarray]:
    d, h, w = spec.shape
    margin = 6
    if d <= 2 * margin or h <= 2 * margin or w <= 2 * margin:
        raise GenerationError(f"volume {spec.shape} too small for a drifting blob")
    blob = np.zeros(spec.shape, dtype=bool)
    pos = np.array(
        [g.integers(margin, d - margin), g.integers(margin, h - margin), g.integers(margin, w - margin)],
        dtype=np.int64,
    )
    for _ in range(int(g.integers(4, 9))):
        radius = float(g.uniform(*spec.radius_range))
        blob |= _ball_mask(spec.shape, tuple(pos), radius)
        pos = pos + g.integers(-2, 3, size=3)
        pos = np.clip(pos, margin, np.array(spec.shape) - 1 - margin)
    labels = blob.astype(np.uint8)
    # the defining property: signal no stronger than half the noise
    eff_contrast = min(spec.contrast, 0.5 * spec.noise_sigma)
    voxels = g.normal(0.0, spec.noise_sigma, size=spec.shape)
    voxels[labels > 0] += eff_contrast
    return voxels.astype(np.float32), labels


def generate_volume(spec: SynthSpec, seed: int) -> VolumeRecord:
    g = rng.stream(seed, f"synth/{spec.kind}")
    if spec.kind == "cross_slice_shapes":
        voxels, labels = _gen_cross_slice_shapes(spec, g)
    else:
        voxels, labels = _gen_low_contrast_blob(spec, g)
    return VolumeRecord(voxels=voxels, spacing=spec.spacing, modality="synthetic", labels=labels)


def generate_dataset(
    spec: SynthSpec,
    count: int,
    out_dir: str | Path,
    seed: int,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> Path:
    """Write ``count`` volumes plus a train/val/test manifest; returns the
    manifest path."""
    if count != 0 and count < 3:
        raise ConfigError(f"need at least 3 volumes for 3 splits (or 0), got {count}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if count == 0:
        manifest = out_dir / "manifest.txt"
        write_manifest(manifest, {"train": [], "val": [], "test": []})
        return manifest
    paths = []
    for i in range(count):
        rec = generate_volume(spec, rng.derive_seed(seed, f"vol/{i}"))
        p = out_dir / f"vol_{i:04d}.vol"
        write_volume(p, rec)
        paths.append(p)
    n_train = max(1, int(math.floor(fractions[0] * count)))
    n_val = max(1, int(math.floor(fractions[1] * count)))
    n_val = min(n_val, count - n_train - 1)
    splits = {
        "train": paths[:n_train],
        "val": paths[n_train : n_train + n_val],
        "test": paths[n_train + n_val :],
    }
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, splits)
    return manifest


def tight_box(labels: np.ndarray) -> tuple[int, int, int, int, int, int] | None:
    """Inclusive bounding box of all foreground voxels, or None if empty."""
    lab = np.asarray(labels)
    if lab.ndim != 3:
        raise ShapeError(f"expected labels [D, H, W], got {lab.shape}")
    idx = np.nonzero(lab > 0)
    if idx[0].size == 0:
        return None
    return (
        int(idx[0].min()),
        int(idx[1].min()),
        int(idx[2].min()),
        int(idx[0].max()),
        int(idx[1].max()),
        int(idx[2].max()),
    )
