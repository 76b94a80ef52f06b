"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

H = 1e-5


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = H) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = H) -> float:
    """Worst relative error between backprop and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, t, h)))
    return worst
