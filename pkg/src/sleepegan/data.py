"""Sleep-stage labels, labeled epochs and the ``SEGD`` epoch store."""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np


class Stage(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


STAGE_NAMES = [s.name for s in Stage]
REAL, GENERATED = 0, 1


@dataclass
class LabeledEpoch:
    samples: np.ndarray
    stage: Stage
    subject_id: str
    source: int = REAL
    index: int = 0  # position of the epoch within its recording


@dataclass
class EpochSet:
    """Column-oriented bag of equal-length epochs.

    Row order is meaningful: within one subject, real epochs are stored in
    temporal order, which is what sequence construction relies on.
    """

    samples: np.ndarray  # [N, epoch_len] float64
    stages: np.ndarray  # [N] int64
    subjects: np.ndarray  # [N] object (str)
    sources: np.ndarray  # [N] int8
    index: np.ndarray  # [N] int64
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            self.samples = self.samples.reshape(len(self.samples), -1)
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=object)
        self.sources = np.asarray(self.sources, dtype=np.int8)
        self.index = np.asarray(self.index, dtype=np.int64)
        n = len(self.samples)
        for name in ("stages", "subjects", "sources", "index"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"EpochSet column {name!r} has the wrong length")

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def epoch_length(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def empty(cls, epoch_length: int, meta=None) -> "EpochSet":
        return cls(np.zeros((0, epoch_length)), [], [], [], [], dict(meta or {}))

    @classmethod
    def from_epochs(cls, epochs: Sequence[LabeledEpoch], meta=None) -> "EpochSet":
        if not epochs:
            raise ValueError("no epochs given")
        return cls(
            np.stack([e.samples for e in epochs]),
            [int(e.stage) for e in epochs],
            [e.subject_id for e in epochs],
            [e.source for e in epochs],
            [e.index for e in epochs],
            dict(meta or {}),
        )

    def to_epochs(self) -> List[LabeledEpoch]:
        return [
            LabeledEpoch(self.samples[i], Stage(int(self.stages[i])), str(self.subjects[i]),
                         int(self.sources[i]), int(self.index[i]))
            for i in range(len(self))
        ]

    def take(self, rows) -> "EpochSet":
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.intp)
        return EpochSet(self.samples[rows], self.stages[rows], self.subjects[rows],
                        self.sources[rows], self.index[rows], dict(self.meta))

    def select_subjects(self, subjects: Iterable[str]) -> "EpochSet":
        keep = np.isin(self.subjects.astype(str), np.asarray(sorted(set(subjects)), dtype=str))
        return self.take(np.flatnonzero(keep))

    def subject_ids(self) -> List[str]:
        """Distinct subjects in first-appearance order."""
        seen: Dict[str, None] = {}
        for s in self.subjects:
            seen.setdefault(str(s), None)
        return list(seen)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.stages, minlength=len(Stage))

    @staticmethod
    def concat(parts: Sequence["EpochSet"]) -> "EpochSet":
        parts = [p for p in parts if p is not None]
        meta = dict(parts[0].meta)
        return EpochSet(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.stages for p in parts]),
            np.concatenate([p.subjects for p in parts]),
            np.concatenate([p.sources for p in parts]),
            np.concatenate([p.index for p in parts]),
            meta,
        )


# ---------------------------------------------------------------------------
# SEGD container
# ---------------------------------------------------------------------------

SEGD_MAGIC = b"SEGD"
SEGD_VERSION = 1


class StoreError(ValueError):
    pass


def dumps_store(es: EpochSet) -> bytes:
    """Serialize: magic, u16 version, u32+JSON header, then raw columns."""
    table = es.subject_ids()
    lookup = {s: i for i, s in enumerate(table)}
    header = {
        "meta": es.meta,
        "subjects": table,
        "n": len(es),
        "epoch_length": es.epoch_length,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    subj_idx = np.array([lookup[str(s)] for s in es.subjects], dtype="<i4")
    return b"".join(
        [
            SEGD_MAGIC,
            struct.pack("<HI", SEGD_VERSION, len(raw)),
            raw,
            es.stages.astype("<i1").tobytes(),
            subj_idx.tobytes(),
            es.sources.astype("<i1").tobytes(),
            es.index.astype("<i8").tobytes(),
            np.ascontiguousarray(es.samples, dtype="<f8").tobytes(),
        ]
    )


def loads_store(buf: bytes) -> EpochSet:
    if buf[:4] != SEGD_MAGIC:
        raise StoreError("not a SEGD epoch store (bad magic)")
    version, n_raw = struct.unpack_from("<HI", buf, 4)
    if version != SEGD_VERSION:
        raise StoreError(f"unsupported SEGD version {version}")
    pos = 10
    header = json.loads(buf[pos : pos + n_raw].decode("utf-8"))
    pos += n_raw
    n, length = header["n"], header["epoch_length"]
    need = pos + n * (1 + 4 + 1 + 8 + 8 * length)
    if len(buf) != need:
        raise StoreError(f"SEGD size mismatch: expected {need} bytes, got {len(buf)}")

    def col(dtype, count):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    stages = col("<i1", n).astype(np.int64)
    subj_idx = col("<i4", n)
    sources = col("<i1", n).astype(np.int8)
    index = col("<i8", n).astype(np.int64)
    samples = col("<f8", n * length).reshape(n, length).astype(np.float64)
    table = np.asarray(header["subjects"], dtype=object)
    subjects = table[subj_idx] if n else np.zeros(0, dtype=object)
    return EpochSet(samples, stages, subjects, sources, index, header["meta"])


def save_store(path, es: EpochSet) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_store(es))
    os.replace(tmp, path)


def load_store(path) -> EpochSet:
    with open(path, "rb") as fh:
        return loads_store(fh.read())


def stage_from_name(name: str) -> Optional[Stage]:
    try:
        return Stage[name.strip().upper()]
    except KeyError:
        return None
