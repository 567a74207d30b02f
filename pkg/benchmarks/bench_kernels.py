#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times the convolution forward/backward kernels on the shapes that dominate
training, plus the non-local-means filter. Run after `pip install -e .`:

    python benchmarks/bench_kernels.py [--repeat 30]
"""

import argparse
import time

import numpy as np

from n2c.kernels import py_backend

try:
    from n2c.kernels import _core
except ImportError:
    _core = None

CONV_SHAPES = [
    # (label, input [B,C,H,W], kernel [Co,Ci,kh,kw])
    ("conv 1->8 @64x64", (1, 1, 64, 64), (8, 1, 3, 3)),
    ("conv 8->8 @64x64", (1, 8, 64, 64), (8, 8, 3, 3)),
    ("conv 16->16 @32x32", (1, 16, 32, 32), (16, 16, 3, 3)),
    ("conv 32->32 @16x16", (1, 32, 16, 16), (32, 32, 3, 3)),
    ("conv 48->16 @32x32", (1, 48, 32, 32), (16, 48, 3, 3)),
    ("conv 24->8 @64x64", (1, 24, 64, 64), (8, 24, 3, 3)),
    ("conv 8->8 @64x64 B=16", (16, 8, 64, 64), (8, 8, 3, 3)),
]


def timeit(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def bench_conv(backend, x, k, g, repeat):
    h, w = x.shape[2], x.shape[3]
    return (
        timeit(lambda: backend.conv2d_forward(x, k, 1, 1), repeat),
        timeit(lambda: backend.conv2d_grad_input(g, k, h, w, 1, 1), repeat),
        timeit(lambda: backend.conv2d_grad_kernel(g, x, 3, 3, 1, 1), repeat),
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=30)
    args = parser.parse_args()

    if _core is None:
        print("compiled core not built; showing the numpy fallback only")
    rng = np.random.default_rng(0)

    header = f"{'kernel':26s} {'numpy fwd/gi/gk (ms)':>24s}"
    if _core is not None:
        header += f" {'cython fwd/gi/gk (ms)':>24s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))

    for label, xs, ks in CONV_SHAPES:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        g = rng.standard_normal((xs[0], ks[0], xs[2], xs[3])).astype(np.float32)
        py = bench_conv(py_backend, x, k, g, args.repeat)
        line = f"{label:26s} {py[0]:7.2f}/{py[1]:6.2f}/{py[2]:6.2f}"
        if _core is not None:
            cy = bench_conv(_core, x, k, g, args.repeat)
            line += f"    {cy[0]:7.2f}/{cy[1]:6.2f}/{cy[2]:6.2f} {sum(py)/sum(cy):7.2f}x"
        print(line)

    img = rng.standard_normal((64, 64)) * 50.0
    py_t = timeit(lambda: py_backend.nlm_filter(img, 12.0, 5, 11, 100.0), max(3, args.repeat // 5))
    line = f"{'nlm 5/11 @64x64':26s} {py_t:7.2f} ms"
    if _core is not None:
        cy_t = timeit(lambda: _core.nlm_filter(img, 12.0, 5, 11, 100.0), max(3, args.repeat // 5))
        line += f"{'':14s}{cy_t:7.2f} ms {py_t/cy_t:7.2f}x"
    print(line)


if __name__ == "__main__":
    main()
