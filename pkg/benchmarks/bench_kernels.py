#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the NumPy fallback.

Times the two gather/scatter primitives behind the strided convolutions,
plus an end-to-end strided conv forward+backward, on shapes matching the
encoder and generator layers.

Usage: python benchmarks/bench_kernels.py [--iters N]
"""

import argparse
import time

import numpy as np

from stormens import kernels
from stormens.kernels import numpy_backend

CASES = [
    # (label, N, H, W, C, k, stride)
    ("encoder stem 64x64x15", 32, 64, 64, 15, 3, 2),
    ("encoder mid 32x32x12", 32, 32, 32, 12, 3, 2),
    ("generator deep 16x16x32", 32, 16, 16, 32, 3, 2),
    ("discriminator 8x8x64", 32, 8, 8, 64, 3, 2),
]


def _time(fn, iters):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters


def bench_case(label, n, h, w, c, k, stride, iters):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, h, w, c)).astype(np.float32)
    out_h, out_w = -(-h // stride), -(-w // stride)
    pad = max((out_h - 1) * stride + k - h, 0) // 2
    cols = numpy_backend.im2col(x, k, k, stride, pad, pad, out_h, out_w)
    results = {}
    for name, impl in [("cython", None), ("numpy", numpy_backend)]:
        if name == "cython":
            try:
                from stormens.kernels import _fastcore as impl
            except ImportError:
                continue
        t_gather = _time(lambda: impl.im2col(x, k, k, stride, pad, pad, out_h, out_w), iters)
        t_scatter = _time(
            lambda: impl.col2im(cols, n, h, w, c, k, k, stride, pad, pad, out_h, out_w), iters
        )
        results[name] = (t_gather, t_scatter)
    print(f"{label:28s}", end="")
    for name in ("cython", "numpy"):
        if name in results:
            tg, ts = results[name]
            print(f"  {name}: gather {tg * 1e3:7.2f} ms  scatter {ts * 1e3:7.2f} ms", end="")
        else:
            print(f"  {name}: unavailable", end="")
    print()
    return results


def bench_conv_roundtrip(iters):
    """Full strided conv fwd+bwd through the layer stack, per backend."""
    from stormens.neural.layers import Conv2d
    from stormens.neural.net import ParamStore

    print("\nstrided conv fwd+bwd (batch 32, 64x64x15 -> 32x32x24):")
    for backend in ("cython", "numpy"):
        try:
            kernels.use_backend(backend)
        except ImportError:
            print(f"  {backend}: unavailable")
            continue
        rng = np.random.default_rng(0)
        store = ParamStore(dtype=np.float32)
        layer = Conv2d("c", 15, 24, stride=2)
        layer.init_params(store, rng)
        x = rng.standard_normal((32, 64, 64, 15)).astype(np.float32)

        def step():
            y, cache = layer.forward(store, x, "train", rng)
            grads = store.zero_grads()
            layer.backward(store, cache, np.ones_like(y), grads)

        t = _time(step, iters)
        print(f"  {backend}: {t * 1e3:.2f} ms/step")
    kernels.use_backend("cython" if kernels_available() else "numpy")


def kernels_available():
    try:
        from stormens.kernels import _fastcore  # noqa: F401

        return True
    except ImportError:
        return False


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()
    print(f"active backend at import: {kernels.BACKEND}\n")
    for case in CASES:
        bench_case(*case, iters=args.iters)
    bench_conv_roundtrip(args.iters)


if __name__ == "__main__":
    main()
