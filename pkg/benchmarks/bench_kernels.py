"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale desk|replication]

Each kernel runs once per backend before timing so numba compilation is not
counted. Prints the best-of-N wall time per kernel and the speedup.
"""

import argparse
import time

import numpy as np

from sleepegan.autodiff import kernels as K

SHAPES = {
    # batch, channels in/out, length, kernel, stride, lstm (steps, hidden)
    "desk": dict(b=8, cin=16, cout=16, n=256, k=8, stride=1, steps=20, hidden=32),
    "replication": dict(b=16, cin=128, cout=128, n=188, k=8, stride=1, steps=20, hidden=128),
}


def cases(s, rng):
    x = rng.standard_normal((s["b"], s["cin"], s["n"]))
    w = rng.standard_normal((s["cout"], s["cin"], s["k"])) * 0.1
    n_out = (s["n"] - s["k"]) // s["stride"] + 1
    gy = rng.standard_normal((s["b"], s["cout"], n_out))
    h = s["hidden"]
    xw = rng.standard_normal((s["b"], s["steps"], 4 * h)) * 0.5
    h0 = np.zeros((s["b"], h))
    u = rng.standard_normal((h, 4 * h)) * 0.1

    def conv_fwd(be):
        be.conv1d_forward(x, w, s["stride"])

    def conv_bwd(be):
        be.conv1d_backward(x, w, gy, s["stride"])

    def pool(be):
        out, idx = be.maxpool_forward(x, 4, 4)
        be.maxpool_backward(np.ones_like(out), idx, s["n"])

    def lstm(be):
        hs, cs, acts = be.lstm_forward(xw, h0, h0, u)
        be.lstm_backward(np.ones_like(hs), np.zeros_like(h0), np.zeros_like(h0), h0, h0, u, hs, cs, acts)

    return {"conv1d forward": conv_fwd, "conv1d backward": conv_bwd, "maxpool fwd+bwd": pool,
            "lstm fwd+bwd": lstm}


def best_time(fn, be, repeat):
    fn(be)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(be)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", choices=sorted(SHAPES), default="desk")
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(SHAPES[args.scale], rng).items():
        t_np = best_time(fn, K.numpy_backend, args.repeat)
        t_nb = best_time(fn, K.numba_backend, args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
