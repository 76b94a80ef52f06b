"""``SEGK`` checkpoint container.

Layout (all integers little-endian)::

    b"SEGK"               magic
    u16                   format version (1)
    i64                   epoch index
    f64                   validation accuracy (NaN when not applicable)
    f64                   validation macro-F1 (NaN when not applicable)
    u64                   rng seed
    u32 + bytes           extra metadata, UTF-8 JSON with sorted keys
    u32                   number of named arrays
    per array:
      u16 + bytes         name (UTF-8)
      u8                  ndim
      u64 * ndim          shape
      f64 * prod(shape)   payload, little-endian, row-major

Round trips are bit-exact: payloads are written with ``tobytes`` and read
back with ``frombuffer``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

MAGIC = b"SEGK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    epoch: int = -1
    val_acc: float = math.nan
    val_mf1: float = math.nan
    seed: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<HqddQ", VERSION, ckpt.epoch, ckpt.val_acc, ckpt.val_mf1, ckpt.seed)]
    extra = json.dumps(ckpt.extra, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(extra)))
    parts.append(extra)
    parts.append(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a SEGK checkpoint (bad magic)")
    version, epoch, val_acc, val_mf1, seed = struct.unpack("<HqddQ", take(34))
    if version != VERSION:
        raise CheckpointError(f"unsupported SEGK version {version}")
    (n_extra,) = struct.unpack("<I", take(4))
    extra = json.loads(bytes(take(n_extra)).decode("utf-8"))
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(bytes(take(8 * count)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(arrays, epoch, val_acc, val_mf1, seed, extra)


def save(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
