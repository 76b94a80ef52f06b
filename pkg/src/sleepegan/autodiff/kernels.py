"""Hot inner loops: 1-D convolution, max-pooling and the LSTM recurrence.

Two interchangeable implementations live here. The numba versions are
compiled with ``@njit`` and are the default; the pure-numpy versions are
used when numba is missing or when the environment variable
``SLEEPEGAN_NUMBA`` is set to ``0``. Both are always importable so tests
and the benchmark can compare them directly.

All kernels work on float64 C-contiguous arrays. Inputs to the conv
kernels are already padded.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------


def _np_windows(x, k, stride):
    # [B, C, L] -> [B, C, L_out, k]
    return sliding_window_view(x, k, axis=2)[:, :, ::stride, :]


def np_conv1d_forward(x, w, stride):
    cols = _np_windows(x, w.shape[2], stride)
    return np.ascontiguousarray(np.einsum("bclk,ock->bol", cols, w, optimize=True))


def np_conv1d_backward(x, w, gy, stride):
    k = w.shape[2]
    cols = _np_windows(x, k, stride)
    gw = np.einsum("bol,bclk->ock", gy, cols, optimize=True)
    gcols = np.einsum("bol,ock->bclk", gy, w, optimize=True)
    gx = np.zeros_like(x)
    n_out = gy.shape[2]
    stop = stride * (n_out - 1) + 1
    for j in range(k):
        gx[:, :, j : j + stop : stride] += gcols[:, :, :, j]
    return gx, gw


def np_maxpool_forward(x, window, stride):
    win = sliding_window_view(x, window, axis=2)[:, :, ::stride, :]
    arg = win.argmax(axis=3)
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    idx = arg + stride * np.arange(win.shape[2])[None, None, :]
    return np.ascontiguousarray(y), idx.astype(np.int64)


def np_maxpool_backward(gy, idx, length):
    b, c, _ = gy.shape
    gx = np.zeros((b, c, length))
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    # windows may overlap when stride < window, so accumulate
    np.add.at(gx, (bi, ci, idx), gy)
    return gx


def _np_sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def np_lstm_forward(xw, h0, c0, u):
    """Run the recurrence given the input projection ``xw = x @ W + b``.

    Gate order along the last axis of ``xw``/``u`` is (input, forget,
    candidate, output). Returns hidden states, cell states and the gate
    activations needed by the backward pass.
    """
    bsz, steps, four_h = xw.shape
    hid = four_h // 4
    hs = np.empty((bsz, steps, hid))
    cs = np.empty((bsz, steps, hid))
    acts = np.empty((bsz, steps, four_h))
    h, c = h0, c0
    for t in range(steps):
        z = xw[:, t, :] + h @ u
        i = _np_sigmoid(z[:, :hid])
        f = _np_sigmoid(z[:, hid : 2 * hid])
        g = np.tanh(z[:, 2 * hid : 3 * hid])
        o = _np_sigmoid(z[:, 3 * hid :])
        c = f * c + i * g
        h = o * np.tanh(c)
        acts[:, t, :hid] = i
        acts[:, t, hid : 2 * hid] = f
        acts[:, t, 2 * hid : 3 * hid] = g
        acts[:, t, 3 * hid :] = o
        hs[:, t] = h
        cs[:, t] = c
    return hs, cs, acts


def np_lstm_backward(ghs, ghT, gcT, h0, c0, u, hs, cs, acts):
    """BPTT through the recurrence. Returns grads of xw, h0, c0 and u."""
    bsz, steps, hid = hs.shape
    gxw = np.empty((bsz, steps, 4 * hid))
    gu = np.zeros_like(u)
    gh = ghT.copy()
    gc = gcT.copy()
    for t in range(steps - 1, -1, -1):
        i = acts[:, t, :hid]
        f = acts[:, t, hid : 2 * hid]
        g = acts[:, t, 2 * hid : 3 * hid]
        o = acts[:, t, 3 * hid :]
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else c0
        h_prev = hs[:, t - 1] if t > 0 else h0
        gh = gh + ghs[:, t]
        tc = np.tanh(c)
        go = gh * tc
        gc = gc + gh * o * (1.0 - tc * tc)
        gi = gc * g
        gf = gc * c_prev
        gg = gc * i
        gz = np.concatenate(
            (gi * i * (1.0 - i), gf * f * (1.0 - f), gg * (1.0 - g * g), go * o * (1.0 - o)),
            axis=1,
        )
        gxw[:, t] = gz
        gu += h_prev.T @ gz
        gh = gz @ u.T
        gc = gc * f
    return gxw, gh, gc, gu


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_conv1d_forward(x, w, stride):
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    n_out = (length - k) // stride + 1
    w2 = np.ascontiguousarray(w.reshape(cout, cin * k))
    y = np.empty((bsz, cout, n_out))
    col = np.empty((cin * k, n_out))
    for b in range(bsz):
        for c in range(cin):
            for j in range(k):
                row = c * k + j
                for t in range(n_out):
                    col[row, t] = x[b, c, t * stride + j]
        y[b] = np.dot(w2, col)
    return y


@njit(cache=True)
def nb_conv1d_backward(x, w, gy, stride):
    bsz, cin, length = x.shape
    cout, _, k = w.shape
    n_out = gy.shape[2]
    w2 = np.ascontiguousarray(w.reshape(cout, cin * k))
    gw2 = np.zeros((cout, cin * k))
    gx = np.zeros_like(x)
    col = np.empty((cin * k, n_out))
    for b in range(bsz):
        for c in range(cin):
            for j in range(k):
                row = c * k + j
                for t in range(n_out):
                    col[row, t] = x[b, c, t * stride + j]
        gyb = np.ascontiguousarray(gy[b])
        gw2 += np.dot(gyb, col.T)
        gcol = np.dot(w2.T, gyb)
        for c in range(cin):
            for j in range(k):
                row = c * k + j
                for t in range(n_out):
                    gx[b, c, t * stride + j] += gcol[row, t]
    return gx, gw2.reshape(cout, cin, k)


@njit(cache=True)
def nb_maxpool_forward(x, window, stride):
    bsz, ch, length = x.shape
    n_out = (length - window) // stride + 1
    y = np.empty((bsz, ch, n_out))
    idx = np.empty((bsz, ch, n_out), dtype=np.int64)
    for b in range(bsz):
        for c in range(ch):
            for t in range(n_out):
                start = t * stride
                best = x[b, c, start]
                arg = start
                for j in range(start + 1, start + window):
                    if x[b, c, j] > best:
                        best = x[b, c, j]
                        arg = j
                y[b, c, t] = best
                idx[b, c, t] = arg
    return y, idx


@njit(cache=True)
def nb_maxpool_backward(gy, idx, length):
    bsz, ch, n_out = gy.shape
    gx = np.zeros((bsz, ch, length))
    for b in range(bsz):
        for c in range(ch):
            for t in range(n_out):
                gx[b, c, idx[b, c, t]] += gy[b, c, t]
    return gx


@njit(cache=True)
def _nb_sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@njit(cache=True)
def nb_lstm_forward(xw, h0, c0, u):
    bsz, steps, four_h = xw.shape
    hid = four_h // 4
    hs = np.empty((bsz, steps, hid))
    cs = np.empty((bsz, steps, hid))
    acts = np.empty((bsz, steps, four_h))
    h = h0.copy()
    c = c0.copy()
    for t in range(steps):
        z = np.dot(h, u)
        for b in range(bsz):
            for j in range(hid):
                i = _nb_sigmoid(xw[b, t, j] + z[b, j])
                f = _nb_sigmoid(xw[b, t, hid + j] + z[b, hid + j])
                g = np.tanh(xw[b, t, 2 * hid + j] + z[b, 2 * hid + j])
                o = _nb_sigmoid(xw[b, t, 3 * hid + j] + z[b, 3 * hid + j])
                cn = f * c[b, j] + i * g
                c[b, j] = cn
                h[b, j] = o * np.tanh(cn)
                acts[b, t, j] = i
                acts[b, t, hid + j] = f
                acts[b, t, 2 * hid + j] = g
                acts[b, t, 3 * hid + j] = o
                hs[b, t, j] = h[b, j]
                cs[b, t, j] = cn
    return hs, cs, acts


@njit(cache=True)
def nb_lstm_backward(ghs, ghT, gcT, h0, c0, u, hs, cs, acts):
    bsz, steps, hid = hs.shape
    gxw = np.empty((bsz, steps, 4 * hid))
    gu = np.zeros_like(u)
    gh = ghT.copy()
    gc = gcT.copy()
    gz = np.empty((bsz, 4 * hid))
    ut = np.ascontiguousarray(u.T)
    for t in range(steps - 1, -1, -1):
        for b in range(bsz):
            for j in range(hid):
                i = acts[b, t, j]
                f = acts[b, t, hid + j]
                g = acts[b, t, 2 * hid + j]
                o = acts[b, t, 3 * hid + j]
                c_prev = cs[b, t - 1, j] if t > 0 else c0[b, j]
                ghv = gh[b, j] + ghs[b, t, j]
                tc = np.tanh(cs[b, t, j])
                gcv = gc[b, j] + ghv * o * (1.0 - tc * tc)
                gz[b, j] = gcv * g * i * (1.0 - i)
                gz[b, hid + j] = gcv * c_prev * f * (1.0 - f)
                gz[b, 2 * hid + j] = gcv * i * (1.0 - g * g)
                gz[b, 3 * hid + j] = ghv * tc * o * (1.0 - o)
                gc[b, j] = gcv * f
        gxw[:, t, :] = gz
        if t > 0:
            h_prev = np.ascontiguousarray(hs[:, t - 1, :])
        else:
            h_prev = h0
        gu += np.dot(h_prev.T, gz)
        gh = np.dot(gz, ut)
    return gxw, gh, gc, gu


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

numpy_backend = SimpleNamespace(
    name="numpy",
    conv1d_forward=np_conv1d_forward,
    conv1d_backward=np_conv1d_backward,
    maxpool_forward=np_maxpool_forward,
    maxpool_backward=np_maxpool_backward,
    lstm_forward=np_lstm_forward,
    lstm_backward=np_lstm_backward,
)

numba_backend = SimpleNamespace(
    name="numba",
    conv1d_forward=nb_conv1d_forward,
    conv1d_backward=nb_conv1d_backward,
    maxpool_forward=nb_maxpool_forward,
    maxpool_backward=nb_maxpool_backward,
    lstm_forward=nb_lstm_forward,
    lstm_backward=nb_lstm_backward,
)


def _default_backend():
    flag = os.environ.get("SLEEPEGAN_NUMBA", "1").strip().lower()
    if not NUMBA_AVAILABLE or flag in ("0", "false", "no", "off"):
        return numpy_backend
    return numba_backend


backend = _default_backend()


def use_backend(name: str) -> None:
    """Switch the active kernel set ('numba' or 'numpy') at runtime."""
    global backend
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba is not installed")
        backend = numba_backend
    elif name == "numpy":
        backend = numpy_backend
    else:
        raise ValueError(f"unknown backend {name!r}")


def active() -> SimpleNamespace:
    return backend
