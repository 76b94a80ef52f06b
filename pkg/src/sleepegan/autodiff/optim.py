from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.first_moment = [np.zeros_like(p.data) for p in params]
        st.second_moment = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``.

    A missing gradient (None) is treated as zero.
    """
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ValueError("Adam state is not aligned with the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Thin wrapper that binds a parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps
        )

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        out = {}
        for n, m, v in zip(names, self.state.first_moment, self.state.second_moment):
            out[f"adam.m.{n}"] = m.copy()
            out[f"adam.v.{n}"] = v.copy()
        return out

    def load_state_arrays(self, names: Sequence[str], arrays: Dict[str, np.ndarray], step: int) -> None:
        self.state.first_moment = [arrays[f"adam.m.{n}"].copy() for n in names]
        self.state.second_moment = [arrays[f"adam.v.{n}"].copy() for n in names]
        self.state.step_count = int(step)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
