"""Benchmark the numba conv kernels against the pure-numpy im2col fallback.

Shapes are taken from the architecture's hot layers: the stage-1 merge conv
(largest single cost in every config), a depthwise dilated branch, a strided
reduce, and a decoder transpose-like gradient.  Run:

    python benchmarks/bench_kernels.py [--repeat 5]

The same kernels are what DUALSEG_BACKEND selects at import time; use this
table to pick a backend for your machine.
"""

import argparse
import time

import numpy as np

from dualseg.kernels import numpy_impl

try:
    from dualseg.kernels import numba_impl
except ImportError:
    numba_impl = None

CASES = [
    # label,                          x shape,            w shape,            stride, pad, dil, groups
    ("stem 3x3 s2 (h/2)",             (1, 3, 384, 640),   (32, 3, 3, 3),      2, 1, 1, 1),
    ("merge 3x3 large (h/4)",         (1, 259, 96, 160),  (256, 259, 3, 3),   1, 1, 1, 1),
    ("depthwise dil-4 (h/4)",         (1, 25, 96, 160),   (25, 1, 3, 3),      1, 4, 4, 25),
    ("pointwise 1x1 (h/8)",           (1, 512, 48, 80),   (128, 512, 1, 1),   1, 0, 1, 1),
    ("train batch nano merge (h/4)",  (10, 35, 16, 16),   (32, 35, 3, 3),     1, 1, 1, 1),
]


def bench(fn, args, repeat):
    fn(*args)                       # warm-up (and numba compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = [("numpy", numpy_impl)] + ([("numba", numba_impl)] if numba_impl else [])
    print(f"{'case':<32}{'op':<14}" + "".join(f"{n:>12}" for n, _ in impls) + f"{'ratio':>9}")
    for label, xs, ws, s, p, d, g in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        y = numpy_impl.conv2d_forward(x, w, None, (s, s), (p, p), (d, d), g)
        gout = rng.standard_normal(y.shape).astype(np.float32)
        ops = [
            ("forward", lambda impl: (impl.conv2d_forward, (x, w, None, (s, s), (p, p), (d, d), g))),
            ("grad_input", lambda impl: (impl.conv2d_grad_input, (gout, w, x.shape, (s, s), (p, p), (d, d), g))),
            ("grad_weight", lambda impl: (impl.conv2d_grad_weight, (gout, x, w.shape, (s, s), (p, p), (d, d), g))),
        ]
        for op_name, mk in ops:
            times = []
            for _, impl in impls:
                fn, fargs = mk(impl)
                times.append(bench(fn, fargs, args.repeat))
            row = f"{label:<32}{op_name:<14}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>8.2f}x"
            print(row)


if __name__ == "__main__":
    main()
