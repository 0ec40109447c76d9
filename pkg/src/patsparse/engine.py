"""float32 inference: a dense reference path and the pattern-specialized sparse path.

Both paths distribute whole output filters round-robin over worker threads,
so a filter's reduction order never depends on the thread count. The numba
kernels release the GIL, which is what lets the thread pool scale.
"""
from __future__ import annotations

import csv
import io
import time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nn import Conv2d, Linear, MaxPool2d, Network, ReLU
from .pack import MAX_K, PackedModel, unpack, unpack_layers
from .patterns import PatternLibrary

_pools: dict[int, ThreadPoolExecutor] = {}


def _pool(threads: int) -> ThreadPoolExecutor:
    if threads not in _pools:
        _pools[threads] = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="patsparse")
    return _pools[threads]


def _partition(F: int, threads: int) -> list:
    return [np.arange(t, F, threads, dtype=np.int64) for t in range(min(threads, F))]


def _run(fn, F: int, threads: int) -> None:
    """Call ``fn(filters)`` on disjoint round-robin filter slices."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    parts = _partition(F, threads)
    if len(parts) == 1:
        fn(parts[0])
        return
    for fut in [_pool(threads).submit(fn, p) for p in parts]:
        fut.result()


@dataclass(frozen=True)
class PatternKernelTable:
    library: PatternLibrary
    width: int                 # padded input row length the flat strides refer to
    offsets: np.ndarray        # [K, 4, 2] (row, col) of each tap in ascending bit order
    flat: np.ndarray           # [K, 4] row * width + col

    def __len__(self):
        return self.library.K


def specialize_patterns(library: PatternLibrary, width: int) -> PatternKernelTable:
    if library.K > MAX_K:
        raise ValueError(f"at most {MAX_K} patterns can be specialized, got {library.K}")
    offsets = np.array([[divmod(p, 3) for p in m.positions] for m in library.masks], dtype=np.int64)
    flat = offsets[:, :, 0] * width + offsets[:, :, 1]
    return PatternKernelTable(library, int(width), offsets, flat)


def _pad32(x, pad):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return x


def _pool32(x, size):
    b, c, h, w = x.shape
    h2, w2 = h // size, w // size
    return x[:, :, : h2 * size, : w2 * size].reshape(b, c, h2, size, w2, size).max(axis=(3, 5))


def _dense_blocks(net):
    """Normalize a Network (or unpack_layers output) to conv blocks + head."""
    if isinstance(net, Network):
        blocks, head = [], None
        for layer in net.layers:
            if isinstance(layer, Conv2d):
                blocks.append([layer.weights, layer.bias, layer.stride, layer.pad, False, 0])
            elif isinstance(layer, ReLU):
                blocks[-1][4] = True
            elif isinstance(layer, MaxPool2d):
                blocks[-1][5] = layer.size
            elif isinstance(layer, Linear):
                head = (layer.weights, layer.bias)
        return [tuple(b) for b in blocks], head, net.input_shape
    blocks = list(net)
    return blocks, None, None


def _check_input(x, expect):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or (expect is not None and tuple(x.shape[1:]) != tuple(expect)):
        raise ValueError(f"input shape {x.shape} does not match expected [B, {', '.join(map(str, expect or ()))}]")
    return x


def execute_dense(net, x, threads: int = 1) -> np.ndarray:
    """Dense float32 forward pass of a Network or a list of unpacked conv blocks."""
    blocks, head, shape = _dense_blocks(net)
    x = _check_input(x, shape)
    for w, b, stride, pad, relu, pool in blocks:
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"conv expects {w.shape[1]} channels, input has {x.shape[1]}")
        xp = _pad32(x, pad)
        ho = (xp.shape[2] - 3) // stride + 1
        wo = (xp.shape[3] - 3) // stride + 1
        out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=np.float32)
        w32 = np.ascontiguousarray(w, dtype=np.float32)
        b32 = np.ascontiguousarray(b, dtype=np.float32)
        _run(lambda fs: kernels.dense_conv(xp, w32, b32, stride, ho, wo, fs, out), w.shape[0], threads)
        if relu:
            np.maximum(out, 0, out=out)
        x = _pool32(out, pool) if pool else out
    if head is not None:
        x = x.reshape(x.shape[0], -1) @ head[0].astype(np.float32).T + head[1].astype(np.float32)
    return x


@dataclass
class _LayerPlan:
    group_ptr: np.ndarray
    group_pat: np.ndarray
    filter_group_ptr: np.ndarray
    chan: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    tables: dict = field(default_factory=dict)


_plans: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _plan(layer) -> _LayerPlan:
    hit = _plans.get(layer)
    if hit is not None:
        return hit
    layer.validate()
    gp, gpat, fgp = layer.groups()
    plan = _LayerPlan(gp, gpat, fgp, np.ascontiguousarray(layer.chan, dtype=np.int64),
                      np.ascontiguousarray(layer.weights, dtype=np.float32),
                      np.ascontiguousarray(layer.bias, dtype=np.float32))
    _plans[layer] = plan
    return plan


def execute_sparse(packed: PackedModel, x, threads: int = 1, count_macs: bool = False):
    """Run the packed model. Returns the output, or ``(output, macs)`` with ``count_macs``.

    ``macs`` counts executed multiplies over the whole batch.

    Without a classifier head the final feature map is returned in the
    original filter order.
    """
    x = _check_input(x, packed.input_shape)
    macs = 0
    for layer in packed.layers:
        p = _plan(layer)
        xp = _pad32(x, layer.pad)
        ho = (xp.shape[2] - 3) // layer.stride + 1
        wo = (xp.shape[3] - 3) // layer.stride + 1
        table = p.tables.get(xp.shape[3])
        if table is None:
            table = p.tables[xp.shape[3]] = specialize_patterns(layer.library, xp.shape[3])
        out = np.empty((x.shape[0], layer.F, ho, wo), dtype=np.float32)
        counters = []

        def work(fs, layer=layer, p=p, xp=xp, out=out, ho=ho, wo=wo, table=table):
            ctr = np.zeros(1 if count_macs else 0, dtype=np.int64)
            counters.append(ctr)
            kernels.pattern_conv(xp, p.group_ptr, p.group_pat, p.filter_group_ptr, p.chan, p.weights,
                                 table.offsets, p.bias, layer.stride, ho, wo, fs, out, ctr)

        _run(work, layer.F, threads)
        if count_macs:
            macs += int(sum(c.sum() for c in counters))
        if layer.relu:
            np.maximum(out, 0, out=out)
        x = _pool32(out, layer.pool) if layer.pool else out
    if packed.head_weights is not None:
        x = x.reshape(x.shape[0], -1) @ packed.head_weights.T + packed.head_bias
    elif packed.layers:
        res = np.empty_like(x)
        res[:, packed.layers[-1].filter_perm] = x
        x = res
    return (x, macs) if count_macs else x


def relative_error(a, b) -> float:
    """max |a - b| / max |b| (0 when both are all zeros)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    if scale == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / scale)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

BENCH_FIELDS = ("config", "path", "threads", "ms_median", "ms_p10", "ms_p90", "speedup", "checksum")


@dataclass
class BenchRow:
    config: str
    path: str
    threads: int
    samples: list
    speedup: float
    checksum: float

    @property
    def ms_median(self):
        return float(np.median(self.samples))

    @property
    def ms_p10(self):
        return float(np.percentile(self.samples, 10))

    @property
    def ms_p90(self):
        return float(np.percentile(self.samples, 90))


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def row(self, path, threads=None) -> BenchRow:
        for r in self.rows:
            if r.path == path and (threads is None or r.threads == threads):
                return r
        raise KeyError((path, threads))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in self.rows:
            w.writerow([r.config, r.path, r.threads, f"{r.ms_median:.4f}", f"{r.ms_p10:.4f}",
                        f"{r.ms_p90:.4f}", f"{r.speedup:.3f}", f"{r.checksum:.6e}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'config':<16}{'path':<8}{'thr':>4}{'median ms':>12}{'p10':>10}{'p90':>10}{'speedup':>9}"]
        for r in self.rows:
            lines.append(f"{r.config:<16}{r.path:<8}{r.threads:>4}{r.ms_median:>12.3f}"
                         f"{r.ms_p10:>10.3f}{r.ms_p90:>10.3f}{r.speedup:>9.2f}")
        return "\n".join(lines)


def _time(fn, iters, warmup):
    for _ in range(warmup):
        out = fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        out = fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples, out


def bench(packed: PackedModel, x, iters: int = 10, threads=(1,), warmup: int = 3,
          config: str = "model", report: BenchReport | None = None) -> BenchReport:
    """Median-of-``iters`` timing of the dense and sparse paths on the same input."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    warmup = max(3, warmup)
    report = report or BenchReport()
    dense_model = unpack(packed) if packed.head_weights is not None else unpack_layers(packed)
    for t in ([threads] if np.isscalar(threads) else threads):
        d_samples, d_out = _time(lambda: execute_dense(dense_model, x, threads=t), iters, warmup)
        s_samples, s_out = _time(lambda: execute_sparse(packed, x, threads=t), iters, warmup)
        d_med, s_med = float(np.median(d_samples)), float(np.median(s_samples))
        report.rows.append(BenchRow(config, "dense", t, d_samples, 1.0, float(np.sum(d_out, dtype=np.float64))))
        report.rows.append(BenchRow(config, "sparse", t, s_samples, d_med / s_med,
                                    float(np.sum(s_out, dtype=np.float64))))
    return report
