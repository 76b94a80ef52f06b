"""Normalization, augmentation, minority rebalancing and subject-wise folds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import GENERATED, EpochSet, Stage

log = logging.getLogger(__name__)

PERCENTILE = 99.5


class PipelineConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_epochs(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Robust-scale the epochs of one recording into [-1, 1].

    Subtract the recording median, divide by the 99.5th percentile of the
    absolute deviation, clamp. Returns ``(normalized, keep)`` where ``keep``
    flags epochs that are usable: a flat recording drops entirely and flat
    individual epochs are dropped too.
    """
    x = np.asarray(samples, dtype=np.float64)
    med = np.median(x)
    dev = x - med
    scale = np.percentile(np.abs(dev), PERCENTILE)
    flat = np.ptp(x, axis=1) == 0
    if scale == 0 or not np.isfinite(scale):
        log.warning("recording has zero robust scale; all %d epochs dropped", len(x))
        return np.zeros_like(x), np.zeros(len(x), dtype=bool)
    out = np.clip(dev / scale, -1.0, 1.0)
    return out, ~flat


def normalize_set(es: EpochSet) -> EpochSet:
    """Apply :func:`normalize_epochs` per recording of an epoch store.

    A recording is a run of rows of one subject whose epoch index keeps
    increasing; a drop in index starts the next night.
    """
    out = es.samples.copy()
    keep = np.ones(len(es), dtype=bool)
    for rows in recording_groups(es):
        out[rows], keep[rows] = normalize_epochs(es.samples[rows])
    res = es.take(np.flatnonzero(keep))
    res.samples = out[keep]
    res.meta = dict(es.meta, normalized=True)
    return res


def recording_groups(es: EpochSet) -> List[np.ndarray]:
    groups = []
    real = np.flatnonzero(es.sources != GENERATED)
    for subj in es.subject_ids():
        rows = real[es.subjects[real] == subj]
        if not len(rows):
            continue
        breaks = np.flatnonzero(np.diff(es.index[rows]) <= 0) + 1
        groups.extend(np.split(rows, breaks))
    return groups


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def signal_augment(sequence: np.ndarray, max_shift: int, rng: np.random.Generator,
                   shift: Optional[int] = None) -> np.ndarray:
    """Circularly shift a [L, epoch_len] sequence as one concatenated signal.

    The shift is drawn uniformly from [-max_shift, max_shift] unless given.
    """
    seq = np.asarray(sequence)
    n_len = seq.shape[-1]
    if max_shift >= n_len:
        raise ValueError("max_shift must be smaller than the epoch length")
    if shift is None:
        shift = int(rng.integers(-max_shift, max_shift + 1)) if max_shift > 0 else 0
    if shift == 0:
        return seq.copy()
    return np.roll(seq.reshape(-1), shift).reshape(seq.shape)


def sequence_augment(stream_length: int, seq_len: int, rng: Optional[np.random.Generator] = None,
                     offset: Optional[int] = None) -> List[np.ndarray]:
    """Chunk positions 0..stream_length-1 into length-``seq_len`` runs after a skip.

    The skip is uniform in [0, seq_len) unless ``offset`` is given; a short
    remainder is dropped. Returns a list of position arrays.
    """
    if stream_length < seq_len:
        return []
    if offset is None:
        offset = int(rng.integers(0, seq_len))
    n = (stream_length - offset) // seq_len
    return [np.arange(offset + i * seq_len, offset + (i + 1) * seq_len) for i in range(n)]


def contiguous_streams(es: EpochSet) -> List[np.ndarray]:
    """Row-index arrays of temporally contiguous real epochs, per subject."""
    streams = []
    for rows in recording_groups(es):
        breaks = np.flatnonzero(np.diff(es.index[rows]) != 1) + 1
        streams.extend(np.split(rows, breaks))
    return streams


def training_sequences(es: EpochSet, seq_len: int, rng: np.random.Generator,
                       augment: bool = True) -> np.ndarray:
    """Row indices [n_seq, seq_len] for one training epoch.

    Real streams get a random sequence-augmentation offset; generated epochs
    form their own sequences, wrapping around to fill the last one.
    """
    seqs = []
    for stream in contiguous_streams(es):
        if len(stream) < seq_len:
            log.warning("stream of %d epochs shorter than %d skipped", len(stream), seq_len)
            continue
        off = None if augment else 0
        for pos in sequence_augment(len(stream), seq_len, rng, offset=off):
            seqs.append(stream[pos])
    gen = np.flatnonzero(es.sources == GENERATED)
    if len(gen):
        gen = gen[rng.permutation(len(gen))] if augment else gen
        n_seq = math.ceil(len(gen) / seq_len)
        padded = np.resize(gen, n_seq * seq_len)
        seqs.extend(padded.reshape(n_seq, seq_len))
    if not seqs:
        return np.zeros((0, seq_len), dtype=np.int64)
    return np.asarray(seqs, dtype=np.int64)


def evaluation_sequences(es: EpochSet, seq_len: int) -> List[np.ndarray]:
    """Cover every real epoch once: length-L chunks plus a shorter remainder."""
    out = []
    for stream in contiguous_streams(es):
        for start in range(0, len(stream), seq_len):
            out.append(stream[start : start + seq_len])
    return out


# ---------------------------------------------------------------------------
# rebalancing
# ---------------------------------------------------------------------------

POLICIES = ("second_smallest", "target_count", "none")


def rebalance_plan(counts: Sequence[int], policy: str = "second_smallest",
                   target_count: Optional[int] = None, stage: Optional[int] = None) -> Dict[int, int]:
    """How many generated epochs to add, as {stage: n}.

    The smallest class (or ``stage``) is raised to the second-smallest class
    count, or to ``target_count`` when given.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if policy == "none":
        return {}
    if policy not in POLICIES:
        raise PipelineConfigError(f"unknown rebalance policy {policy!r}")
    minority = int(np.argmin(counts)) if stage is None else int(stage)
    if target_count is not None:
        target = int(target_count)
    elif policy == "target_count":
        raise PipelineConfigError("policy 'target_count' needs rebalance.target_count")
    else:
        target = int(np.sort(counts)[1])
    return {minority: max(0, target - int(counts[minority]))}


Generator = Callable[[int, np.random.Generator], np.ndarray]


def rebalance(es: EpochSet, generator: Optional[Generator], policy: str = "second_smallest",
              target_count: Optional[int] = None, stage: Optional[int] = None,
              rng: Optional[np.random.Generator] = None, subject_id: str = "__generated__") -> EpochSet:
    """Append generated epochs for the minority class of a training set."""
    plan = rebalance_plan(es.class_counts(), policy, target_count, stage)
    parts = [es]
    for st, n in plan.items():
        if n == 0:
            continue
        if generator is None:
            raise PipelineConfigError(f"no generator available for stage {Stage(st).name}")
        samples = np.asarray(generator(n, rng), dtype=np.float64)
        if samples.shape != (n, es.epoch_length):
            raise PipelineConfigError(f"generator returned {samples.shape}, expected {(n, es.epoch_length)}")
        parts.append(EpochSet(samples, np.full(n, st), np.full(n, subject_id, dtype=object),
                              np.full(n, GENERATED), np.arange(n), dict(es.meta)))
    return EpochSet.concat(parts) if len(parts) > 1 else es


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class Fold:
    train: List[str]
    val: List[str]
    test: List[str]


@dataclass
class FoldPlan:
    k: int
    folds: List[Fold]

    def check_leakage(self) -> None:
        all_test = []
        for i, f in enumerate(self.folds):
            tr, va, te = set(f.train), set(f.val), set(f.test)
            if tr & va or tr & te or va & te:
                raise AssertionError(f"fold {i}: subject sets overlap")
            if not te:
                raise AssertionError(f"fold {i}: empty test set")
            all_test.extend(f.test)
        if len(all_test) != len(set(all_test)):
            raise AssertionError("a subject is tested in more than one fold")


def make_folds(subjects: Sequence[str], k: int = 20, val_fraction: float = 0.1,
               rng: Optional[np.random.Generator] = None) -> FoldPlan:
    """Subject-wise k-fold plan with a subject-wise validation hold-out."""
    subjects = sorted(set(str(s) for s in subjects))
    if k < 2:
        raise PipelineConfigError("k must be at least 2")
    if len(subjects) < k:
        raise PipelineConfigError(f"{len(subjects)} subjects cannot fill {k} folds")
    if not 0.0 <= val_fraction < 1.0:
        raise PipelineConfigError("val_fraction must be in [0, 1)")
    rng = rng or np.random.default_rng(0)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    groups = np.array_split(np.array(order, dtype=object), k)
    folds = []
    for gi, test in enumerate(groups):
        rest = [s for gj, g in enumerate(groups) if gj != gi for s in g]
        n_val = math.ceil(val_fraction * len(rest)) if val_fraction > 0 else 0
        n_val = min(n_val, len(rest) - 1)
        perm = rng.permutation(len(rest))
        val = sorted(rest[i] for i in perm[:n_val])
        train = sorted(rest[i] for i in perm[n_val:])
        folds.append(Fold(train, val, sorted(test.tolist())))
    plan = FoldPlan(k, folds)
    plan.check_leakage()
    return plan
