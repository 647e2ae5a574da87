"""Binary checkpoints, byte-exact across save/load/save.

Layout (all integers little-endian):

    magic   4s   "MAC1"
    version u32  currently 1
    config  u32 length + UTF-8 run-config text, stored verbatim
    step    u64  training step counter
    count   u32  number of parameters
    per parameter, in registry order:
        u32 name length, name bytes
        u8  trainable flag
        u32 ndim, then u32 per dimension
        float32 payload, C order
    u8 moments flag; when set, per trainable parameter in registry
    order: Adam first-moment payload then second-moment payload, same
    shape as the parameter.

Random state needs no blob of its own: every stream in this codebase is
derived statelessly from (seed, tag) and the tags are built from the
step counter, so config text + step pin the generator state exactly.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ContractError, FormatError
from ..tensor import Tensor
from .optim import AdamState

MAGIC = b"MAC1"
VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    step: int
    arrays: "OrderedDict[str, np.ndarray]"
    trainable: dict
    moments: tuple | None  # (m dict, v dict) over trainable names


def save_checkpoint(
    path,
    params: Mapping[str, Tensor],
    config_text: str = "",
    step: int = 0,
    adam: AdamState | None = None,
) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    config_bytes = config_text.encode("utf-8")
    buf += struct.pack("<I", len(config_bytes)) + config_bytes
    buf += struct.pack("<Q", step)
    buf += struct.pack("<I", len(params))
    trainable_names = []
    for name, t in params.items():
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<I", len(name_bytes)) + name_bytes
        buf += struct.pack("<B", 1 if t.requires_grad else 0)
        buf += struct.pack("<I", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        if t.requires_grad:
            trainable_names.append(name)
    buf += struct.pack("<B", 1 if adam is not None else 0)
    if adam is not None:
        for name in trainable_names:
            if name not in adam.m:
                raise ContractError(f"optimizer state missing parameter {name}")
            buf += np.ascontiguousarray(adam.m[name], dtype="<f4").tobytes()
            buf += np.ascontiguousarray(adam.v[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> CheckpointData:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (config_len,) = r.unpack("<I")
    config_text = r.take(config_len).decode("utf-8")
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    trainable: dict = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (flag,) = r.unpack("<B")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
        arrays[name] = data
        trainable[name] = bool(flag)
    (has_moments,) = r.unpack("<B")
    moments = None
    if has_moments:
        m_dict, v_dict = {}, {}
        for name, arr in arrays.items():
            if not trainable[name]:
                continue
            m_dict[name] = np.frombuffer(r.take(4 * arr.size), dtype="<f4").reshape(arr.shape).copy()
            v_dict[name] = np.frombuffer(r.take(4 * arr.size), dtype="<f4").reshape(arr.shape).copy()
        moments = (m_dict, v_dict)
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes after checkpoint")
    return CheckpointData(config_text, step, arrays, trainable, moments)


def load_into(
    params: Mapping[str, Tensor], ckpt: CheckpointData, adam: AdamState | None = None
) -> None:
    """Copy checkpoint arrays into live parameters (and Adam state)."""
    names = list(params.keys())
    if names != list(ckpt.arrays.keys()):
        missing = set(names) - set(ckpt.arrays)
        extra = set(ckpt.arrays) - set(names)
        raise ContractError(
            f"parameter registry mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, t in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != t.data.shape:
            raise ContractError(f"{name}: checkpoint shape {arr.shape} != model {t.data.shape}")
        if bool(t.requires_grad) != ckpt.trainable[name]:
            raise ContractError(f"{name}: trainable flag mismatch")
        t.data[...] = arr
    if adam is not None:
        if ckpt.moments is None:
            raise ContractError("checkpoint has no optimizer moments to restore")
        m_dict, v_dict = ckpt.moments
        for name in adam.m:
            adam.m[name][...] = m_dict[name]
            adam.v[name][...] = v_dict[name]
        adam.step = ckpt.step
