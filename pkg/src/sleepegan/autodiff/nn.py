"""Parameter containers for the networks.

A :class:`Module` owns named parameter tensors and child modules. Names are
dotted paths (``conv1.weight``) and are what checkpoints store.
"""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.0) -> np.ndarray:
    """Variance-preserving init for (leaky) ReLU layers."""
    limit = np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-limit, limit, size=shape)


class Conv1d(Module):
    """Conv layer initialized for a following (leaky) ReLU with ``slope``."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding=0, *, rng,
                 slope: float = 0.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.kernel = kernel
        self.weight = self.add_param("weight", he_uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel, slope))
        self.bias = self.add_param("bias", np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, *, rng):
        super().__init__()
        self.weight = self.add_param("weight", glorot(rng, (in_dim, out_dim), in_dim, out_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LSTM(Module):
    """Single LSTM layer; forget-gate bias starts at 1."""

    def __init__(self, in_dim: int, hidden: int, *, rng):
        super().__init__()
        self.hidden = hidden
        self.w_x = self.add_param("w_x", glorot(rng, (in_dim, 4 * hidden), in_dim, 4 * hidden))
        self.w_h = self.add_param("w_h", glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.bias = self.add_param("bias", b)

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros((batch, self.hidden))), Tensor(np.zeros((batch, self.hidden)))

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return F.lstm_step(x, h, c, self.w_x, self.w_h, self.bias)

    def __call__(self, x: Tensor, h0: Tensor = None, c0: Tensor = None):
        if h0 is None:
            h0, c0 = self.zero_state(x.shape[0])
        return F.lstm_sequence(x, h0, c0, self.w_x, self.w_h, self.bias)
