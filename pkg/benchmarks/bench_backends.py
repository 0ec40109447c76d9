"""Time the numba kernels against their pure-numpy counterparts.

    python benchmarks/bench_backends.py [--iters 10] [--out backends.csv]

Both variants are imported explicitly, so the PATSPARSE_BACKEND flag does
not matter here. Outputs of each pair are checked against each other before
timing.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from patsparse import kernels as K
from patsparse.cli import synthetic_packed
from patsparse.engine import _plan, specialize_patterns


def timeit(fn, iters, warmup=3):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def cases(rng):
    # simplex projection over many rows
    d = rng.standard_normal((4096, 126))
    yield ("simplex_4096x126",
           lambda: K.simplex_project_rows_nb(d), lambda: K.simplex_project_rows_np(d),
           lambda a, b: np.max(np.abs(a[0] - b[0])))

    # training-path im2col / col2im
    xp = rng.standard_normal((32, 16, 18, 18))
    yield ("im2col_32x16x16x16", lambda: K.im2col_nb(xp, 1, 16, 16), lambda: K.im2col_np(xp, 1, 16, 16),
           lambda a, b: np.max(np.abs(a - b)))
    cols = K.im2col_np(xp, 1, 16, 16)
    yield ("col2im_32x16x16x16", lambda: K.col2im_nb(cols, 18, 18, 1, 16, 16),
           lambda: K.col2im_np(cols, 18, 18, 1, 16, 16), lambda a, b: np.max(np.abs(a - b)))

    # inference convolutions on a 64-channel 32x32 layer
    packed = synthetic_packed(64, 32, 1, 0.5, seed=1)
    layer = packed.layers[0]
    p = _plan(layer)
    x = rng.standard_normal((1, 64, 34, 34)).astype(np.float32)
    table = specialize_patterns(layer.library, 34)
    filters = np.arange(64, dtype=np.int64)
    w = rng.standard_normal((64, 64, 3, 3)).astype(np.float32)
    b = rng.standard_normal(64).astype(np.float32)

    def dense(fn):
        out = np.empty((1, 64, 32, 32), np.float32)
        fn(x, w, b, 1, 32, 32, filters, out)
        return out

    def sparse(fn):
        out = np.empty((1, 64, 32, 32), np.float32)
        fn(x, p.group_ptr, p.group_pat, p.filter_group_ptr, p.chan, p.weights, table.offsets, p.bias,
           1, 32, 32, filters, out, np.zeros(0, np.int64))
        return out

    rel = lambda a, b: np.max(np.abs(a - b)) / np.max(np.abs(b))
    yield ("dense_conv_64c_32x32", lambda: dense(K.dense_conv_nb), lambda: dense(K.dense_conv_np), rel)
    yield ("pattern_conv_64c_32x32", lambda: sparse(K.pattern_conv_nb), lambda: sparse(K.pattern_conv_np), rel)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    for name, nb, npy, diff in cases(rng):
        err = float(diff(nb(), npy()))
        t_nb, t_np = timeit(nb, args.iters), timeit(npy, args.iters)
        rows.append((name, t_nb, t_np, t_np / t_nb, err))
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'ratio':>8}{'max diff':>11}")
    for name, a, b, r, e in rows:
        print(f"{name:<26}{a:>10.3f}{b:>10.3f}{r:>8.2f}{e:>11.2e}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["kernel", "numba_ms", "numpy_ms", "numpy_over_numba", "max_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
