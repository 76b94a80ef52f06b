"""Derive independent component seeds from one run seed.

Mixing rule: ``SeedSequence(entropy=seed, spawn_key=(crc32(label1),
crc32(label2), ...))`` and take the first 64-bit word of its state. Labels
are stringified, so ``derive(7, "fold", 3)`` and ``derive(7, "fold", "3")``
agree. The rule is stable across numpy versions because SeedSequence's
hashing is part of numpy's documented reproducibility contract.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive(seed: int, *labels) -> int:
    key = tuple(zlib.crc32(str(lab).encode("utf-8")) for lab in labels)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *labels))
