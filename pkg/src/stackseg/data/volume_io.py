"""Binary volume container and plain-text dataset manifests.

Layout (little-endian throughout):

    offset 0   magic ``MAV1``
    offset 4   u8 voxel dtype code (0=int16, 1=float32, 2=uint8)
    offset 5   u8 modality code (0=ct, 1=mri, 2=video, 3=synthetic)
    offset 6   u32 x3 dims (D, H, W)
    offset 18  f32 x3 voxel spacing (z, y, x)
    offset 30  u32 label flag
    offset 34  zero padding up to the 64-byte header boundary
    offset 64  voxels, C order (x fastest), then uint8 labels if flagged

File length must match the header exactly; anything else is treated as
corruption.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, ShapeError

MAGIC = b"MAV1"
HEADER = struct.Struct("<4sBB3I3fI")
HEADER_SIZE = 64

DTYPE_BY_CODE = {0: np.dtype(np.int16), 1: np.dtype(np.float32), 2: np.dtype(np.uint8)}
CODE_BY_DTYPE = {v: k for k, v in DTYPE_BY_CODE.items()}
MODALITIES = ("ct", "mri", "video", "synthetic")


@dataclass
class VolumeRecord:
    voxels: np.ndarray  # [D, H, W]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "synthetic"
    labels: np.ndarray | None = None  # uint8 [D, H, W]

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ShapeError(f"voxels must be [D, H, W], got {self.voxels.shape}")
        if self.voxels.dtype not in CODE_BY_DTYPE:
            raise FormatError(f"unsupported voxel dtype {self.voxels.dtype}")
        if self.modality not in MODALITIES:
            raise FormatError(f"unknown modality {self.modality!r}; options: {MODALITIES}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise FormatError(f"spacing must be 3 positive floats, got {self.spacing}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.voxels.shape:
                raise ShapeError(
                    f"labels {self.labels.shape} do not match voxels {self.voxels.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


def write_volume(path: str | os.PathLike, rec: VolumeRecord) -> None:
    d, h, w = rec.shape
    header = HEADER.pack(
        MAGIC,
        CODE_BY_DTYPE[rec.voxels.dtype],
        MODALITIES.index(rec.modality),
        d,
        h,
        w,
        *[float(s) for s in rec.spacing],
        1 if rec.labels is not None else 0,
    )
    header = header.ljust(HEADER_SIZE, b"\x00")
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.voxels.tobytes(order="C"))
        if rec.labels is not None:
            f.write(rec.labels.tobytes(order="C"))


def read_volume(path: str | os.PathLike) -> VolumeRecord:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, dtype_code, mod_code, d, h, w, sz, sy, sx, has_labels = HEADER.unpack(
        blob[: HEADER.size]
    )
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dtype_code not in DTYPE_BY_CODE:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    if mod_code >= len(MODALITIES):
        raise FormatError(f"{path}: unknown modality code {mod_code}")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: label flag must be 0 or 1, got {has_labels}")
    dtype = DTYPE_BY_CODE[dtype_code]
    nvox = d * h * w
    expect = HEADER_SIZE + nvox * dtype.itemsize + (nvox if has_labels else 0)
    if len(blob) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(blob)}")
    voxels = np.frombuffer(blob, dtype=dtype, count=nvox, offset=HEADER_SIZE)
    voxels = voxels.reshape(d, h, w).copy()
    labels = None
    if has_labels:
        off = HEADER_SIZE + nvox * dtype.itemsize
        labels = np.frombuffer(blob, dtype=np.uint8, count=nvox, offset=off)
        labels = labels.reshape(d, h, w).copy()
    return VolumeRecord(
        voxels=voxels, spacing=(sz, sy, sx), modality=MODALITIES[mod_code], labels=labels
    )


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(path: str | os.PathLike, splits: dict[str, list]) -> None:
    """Write ``# split: <name>`` sections with one path per line,
    relative to the manifest's directory where possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for split, entries in splits.items():
        lines.append(f"# split: {split}")
        for p in entries:
            p = Path(p).resolve()
            try:
                lines.append(str(p.relative_to(base)))
            except ValueError:
                lines.append(str(p))
        lines.append("")
    path.write_text("\n".join(lines))


def read_manifest(path: str | os.PathLike) -> dict[str, list[Path]]:
    path = Path(path)
    base = path.parent.resolve()
    splits: dict[str, list[Path]] = {}
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if not body.startswith("split:"):
                continue  # plain comment
            current = body[len("split:"):].strip()
            if not current:
                raise FormatError(f"{path}:{lineno}: empty split name")
            splits.setdefault(current, [])
            continue
        if current is None:
            raise FormatError(f"{path}:{lineno}: path before any '# split:' header")
        p = Path(line)
        splits[current].append(p if p.is_absolute() else base / p)
    return splits
