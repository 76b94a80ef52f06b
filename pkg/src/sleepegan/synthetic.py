"""Small synthetic corpora for desk-scale runs and tests."""

from __future__ import annotations

import numpy as np

from .data import EpochSet
from . import pipeline

# dominant frequency (Hz) per stage W, N1, N2, N3, REM
STAGE_FREQS = (10.0, 6.0, 13.0, 2.0, 4.0)

# sticky stage transitions so neighbouring epochs carry context
_TRANSITIONS = np.array(
    [
        [0.80, 0.15, 0.02, 0.01, 0.02],
        [0.10, 0.50, 0.30, 0.02, 0.08],
        [0.03, 0.05, 0.77, 0.10, 0.05],
        [0.02, 0.02, 0.16, 0.80, 0.00],
        [0.05, 0.10, 0.10, 0.00, 0.75],
    ]
)


def spectral_corpus(n_subjects: int = 200, epochs_per_subject: int = 20, fs: int = 64,
                    epoch_seconds: int = 4, noise: float = 0.3, seed: int = 0) -> EpochSet:
    """Five classes told apart by sinusoid frequency, with per-subject shifts.

    Each subject gets its own frequency offset (up to 0.5 Hz), amplitude and
    noise level, and its stage sequence follows a sticky Markov chain.
    """
    rng = np.random.default_rng(seed)
    n = fs * epoch_seconds
    t = np.arange(n) / fs
    samples, stages, subjects, index = [], [], [], []
    for s in range(n_subjects):
        f_off = rng.uniform(-0.5, 0.5)
        amp = rng.uniform(0.6, 1.0)
        sigma = noise * rng.uniform(0.5, 1.5)
        st = int(rng.integers(5))
        for i in range(epochs_per_subject):
            if i:
                st = int(rng.choice(5, p=_TRANSITIONS[st]))
            f = STAGE_FREQS[st] + f_off
            x = amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
            samples.append(x + sigma * rng.standard_normal(n))
            stages.append(st)
            subjects.append(f"syn{s:03d}")
            index.append(i)
    es = EpochSet(np.array(samples), stages, subjects, np.zeros(len(stages)), index,
                  {"fs": fs, "epoch_seconds": epoch_seconds, "source": "synthetic"})
    return pipeline.normalize_set(es)


def sinusoid_epochs(n: int, fs: int = 32, epoch_seconds: int = 4, freq: float = 4.0,
                    amplitude: float = 0.8, jitter: float = 0.1, seed: int = 0) -> np.ndarray:
    """Sinusoids of one frequency with random phase and +-``jitter`` relative amplitude."""
    rng = np.random.default_rng(seed)
    t = np.arange(fs * epoch_seconds) / fs
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = amplitude * rng.uniform(1 - jitter, 1 + jitter, n)
    return amp[:, None] * np.sin(2 * np.pi * freq * t[None, :] + phase[:, None])
