"""Differentiable layers and losses built on :class:`Tensor`."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, _sigmoid

N_STAGES = 5
BCE_EPS = 1e-7


def _pad_pair(padding, k: int) -> tuple[int, int]:
    if padding == "same":
        return (k - 1) // 2, k // 2
    if isinstance(padding, (tuple, list)):
        left, right = int(padding[0]), int(padding[1])
    else:
        left = right = int(padding)
    if left < 0 or right < 0:
        raise ValueError("padding must be non-negative")
    return left, right


def conv_out_length(length: int, k: int, stride: int, padding=0) -> int:
    left, right = _pad_pair(padding, k)
    return (length + left + right - k) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[int, str, Tuple[int, int]] = 0,
) -> Tensor:
    """Cross-correlate ``x`` [B, C_in, L] with ``weight`` [C_out, C_in, K].

    ``padding`` is an int (both sides), a ``(left, right)`` pair, or
    ``"same"`` which keeps the length at stride 1.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv1d expects input [B, C, L] and kernel [O, C, K]")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}"
        )
    if stride < 1:
        raise ValueError("stride must be positive")
    k = weight.shape[2]
    left, right = _pad_pair(padding, k)
    length = x.shape[2]
    if length + left + right < k:
        raise ShapeError(f"conv1d input length {length} (+padding) shorter than kernel {k}")

    xp = x.data
    if left or right:
        xp = np.pad(xp, ((0, 0), (0, 0), (left, right)))
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(weight.data)
    be = kernels.active()
    y = be.conv1d_forward(xp, w, stride)
    if bias is not None:
        y = y + bias.data[None, :, None]

    def back(g):
        g = np.ascontiguousarray(g)
        gxp, gw = be.conv1d_backward(xp, w, g, stride)
        gx = gxp[:, :, left : left + length] if (left or right) else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(y, parents, back)


def maxpool1d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over sliding windows; ties route gradient to the first maximum."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    length = x.shape[2]
    if window > length:
        raise ShapeError(f"pool window {window} exceeds input length {length}")
    be = kernels.active()
    y, idx = be.maxpool_forward(np.ascontiguousarray(x.data), window, stride)
    return Tensor._make(y, (x,), lambda g: (be.maxpool_backward(np.ascontiguousarray(g), idx, length),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky_relu slope must be in (0, 1)")
    d = x.data
    scale = np.where(d > 0, 1.0, slope)
    return Tensor._make(d * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = (d > 0).astype(np.float64)
    return Tensor._make(d * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), back)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Identity (same object) when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped [in, out]."""
    y = x @ weight
    return y + bias if bias is not None else y


def upsample_linear(x: Tensor, length: int) -> Tensor:
    """Linearly interpolate the last axis of ``x`` [B, n] to ``length`` points."""
    n = x.shape[-1]
    return x @ Tensor(interp_matrix(n, length))


def interp_matrix(n: int, length: int) -> np.ndarray:
    """[n, length] matrix whose columns interpolate n points (align corners)."""
    m = np.zeros((n, length))
    if n == 1:
        m[0, :] = 1.0
        return m
    pos = np.linspace(0.0, n - 1, length)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    cols = np.arange(length)
    m[lo, cols] = 1.0 - frac
    m[lo + 1, cols] += frac
    return m


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


def lstm_step(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    w_x: Tensor,
    w_h: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update composed from primitive tensor ops.

    ``w_x`` is [in, 4H], ``w_h`` is [H, 4H]; gate blocks are ordered
    input, forget, candidate, output.
    """
    if x.shape[0] != h_prev.shape[0] or x.shape[0] != c_prev.shape[0]:
        raise ShapeError(
            f"lstm_step batch mismatch: x {x.shape[0]}, h {h_prev.shape[0]}, c {c_prev.shape[0]}"
        )
    hid = w_h.shape[0]
    if h_prev.shape[1] != hid or c_prev.shape[1] != hid or w_x.shape[0] != x.shape[1]:
        raise ShapeError("lstm_step state/weight dimensions are inconsistent")
    z = x @ w_x + h_prev @ w_h + bias
    i = z[:, :hid].sigmoid()
    f = z[:, hid : 2 * hid].sigmoid()
    g = z[:, 2 * hid : 3 * hid].tanh()
    o = z[:, 3 * hid :].sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def lstm_sequence(
    x: Tensor,
    h0: Tensor,
    c0: Tensor,
    w_x: Tensor,
    w_h: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Fused LSTM over ``x`` [B, T, in]; same maths as repeated ``lstm_step``.

    Returns (hidden states [B, T, H], final h, final c). The recurrence runs
    in a single kernel call so long sequences do not grow the tape.
    """
    if x.ndim != 3:
        raise ShapeError("lstm_sequence expects input [B, T, D]")
    bsz, steps, _ = x.shape
    if h0.shape[0] != bsz or c0.shape[0] != bsz:
        raise ShapeError("lstm_sequence batch mismatch between input and state")
    xw = x @ w_x + bias
    be = kernels.active()
    u = np.ascontiguousarray(w_h.data)
    h0d = np.ascontiguousarray(h0.data)
    c0d = np.ascontiguousarray(c0.data)
    hs, cs, acts = be.lstm_forward(np.ascontiguousarray(xw.data), h0d, c0d, u)

    # one tape node carrying all three outputs; the final states are views
    packed = Tensor._make(
        np.concatenate((hs, cs[:, -1:, :]), axis=1),
        (xw, h0, c0, w_h),
        None,
    )

    def back(g):
        ghs = np.ascontiguousarray(g[:, :steps])
        gcT = np.ascontiguousarray(g[:, steps])
        ghT = np.zeros_like(gcT)
        gxw, gh0, gc0, gu = be.lstm_backward(ghs, ghT, gcT, h0d, c0d, u, hs, cs, acts)
        return gxw, gh0, gc0, gu

    if packed.requires_grad:
        packed._backward = back
    seq = packed[:, :steps]
    h_last = packed[:, steps - 1]
    c_last = packed[:, steps]
    return seq, h_last, c_last


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def weighted_cross_entropy(
    logits: Tensor, labels: Sequence[int], weights: Optional[Sequence[float]] = None
) -> Tensor:
    """Mean over rows of ``w[y] * -log softmax(logits)[y]``.

    ``logits`` may carry extra leading axes ([B, L, 5]); every row counts
    once in the mean.
    """
    n_cls = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in 0..{n_cls - 1}")
    w = np.ones(n_cls) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n_cls,) or np.any(w <= 0):
        raise ValueError(f"class weights must be {n_cls} positive numbers")
    flat = logits.reshape(-1, n_cls)
    y = labels.reshape(-1).astype(np.int64)
    logp = log_softmax(flat, axis=1)
    onehot = np.zeros(flat.shape)
    onehot[np.arange(len(y)), y] = w[y]
    return -(logp * onehot).sum() * (1.0 / len(y))


def bce_loss(probabilities: Tensor, targets) -> Tensor:
    """Binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    p = probabilities.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = ((p > BCE_EPS) & (p < 1.0 - BCE_EPS)).astype(np.float64)
    n = p.size
    val = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))

    def back(g):
        d = -(t / pc - (1.0 - t) / (1.0 - pc)) / n
        return (g * d * inside,)

    return Tensor._make(np.asarray(val), (probabilities,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Binary cross-entropy of ``sigmoid(logits)`` computed without saturation.

    Same value as :func:`bce_loss` on unclamped probabilities, but the
    gradient ``sigmoid(z) - t`` never vanishes through a clamp.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    z = logits.data
    n = z.size
    # log(1 + exp(-|z|)) + max(z, 0) - t*z
    val = np.mean(np.logaddexp(0.0, z) - t * z)

    def back(g):
        return (g * (_sigmoid(z) - t) / n,)

    return Tensor._make(np.asarray(val), (logits,), back)
