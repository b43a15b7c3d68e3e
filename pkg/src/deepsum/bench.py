"""Benchmark the two convolution backends against each other.

Times forward and backward passes of the 2D and 3D kernels at network-
representative sizes and checks that both implementations agree. Run via
``deepsum bench`` or ``python -m deepsum.bench``.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels_numpy

try:
    from . import kernels_numba
except ImportError:
    kernels_numba = None


def _time(fn, repeats):
    fn()  # warm-up (numba compiles here)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng, scale=1.0):
    s = max(int(36 * scale), 8)
    f = 8
    return [
        (
            "conv2d 9x{0}x{0}x{1} k3".format(s, f),
            "2d",
            rng.standard_normal((9, s, s, f)),
            rng.standard_normal((3, 3, f, f)),
        ),
        (
            "conv3d 9x{0}x{0}x{1} k3 (fusion)".format(s, f),
            "3d",
            rng.standard_normal((1, 9, s, s, f)),
            rng.standard_normal((3, 3, 3, f, f)),
        ),
    ]


def run_bench(repeats=3, scale=1.0, out=print):
    """Benchmark both backends; returns rows of (name, backend, seconds)."""
    rng = np.random.default_rng(0)
    backends = [("numpy", kernels_numpy)]
    if kernels_numba is not None:
        backends.append(("numba", kernels_numba))

    rows = []
    for name, kind, x, k in _cases(rng, scale):
        results = {}
        for bname, mod in backends:
            if kind == "2d":
                y = mod.conv2d_forward(x, k)
                gy = np.ones_like(y)
                fwd = _time(lambda: mod.conv2d_forward(x, k), repeats)
                bwd = _time(lambda: mod.conv2d_backward(x, k, gy), repeats)
            else:
                y = mod.conv3d_forward(x, k, 1)
                gy = np.ones_like(y)
                fwd = _time(lambda: mod.conv3d_forward(x, k, 1), repeats)
                bwd = _time(lambda: mod.conv3d_backward(x, k, gy, 1), repeats)
            results[bname] = (y, fwd, bwd)
            rows.append((name, bname, fwd, bwd))
            out(f"{name:38s} {bname:6s} forward {fwd * 1e3:8.2f} ms "
                f"backward {bwd * 1e3:8.2f} ms")
        if len(results) == 2:
            diff = np.max(np.abs(results["numpy"][0] - results["numba"][0]))
            out(f"{name:38s} agreement max|diff| = {diff:.3e}")
            if diff > 1e-9:
                raise AssertionError(f"backends disagree on {name}: {diff}")
    return rows


if __name__ == "__main__":
    run_bench()
