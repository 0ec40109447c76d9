"""Pattern-grouped compact layout and the ``.psp`` file format.

Filters of each conv layer are reordered by their pattern composition, each
filter's surviving kernels are grouped by pattern id, and every kernel is
stored as one ``(channel, pattern)`` record plus its 4 weights in ascending
mask-bit order. The next layer's channel indices (or the classifier
columns) are remapped at pack time, so the packed model computes the same
function with no runtime permutation.

``.psp`` layout, little-endian::

    "PSP1"  u16 version  u16 layer_count  u32 C, H, W (input shape)
    per layer:
        u32 F  u32 C  u8 stride  u8 pad  u8 flags(bit0 = ReLU)  u8 pool
        u8 K   u16 masks[K]
        u32 filter_perm[F]       packed position -> original filter
        u32 filter_records[F]    records per packed filter
        u32 record_count
        record_count x (u16 channel, u8 pattern)
        f32 weights[4 * record_count]
        f32 bias[F]              packed filter order
    u32 head_out  u32 head_in    (0, 0 when there is no head)
    f32 head_weights[out * in]  f32 head_bias[out]
    32 bytes source hash (sha256 of the source .pnm, or zeros)
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .connectivity import ConnectivityMask
from .nn import Conv2d, Linear, MaxPool2d, Network, ReLU
from .patterns import PatternLibrary

PSP_MAGIC = b"PSP1"
PSP_VERSION = 1
MAX_K = 16
HEADER_SIZE = 4 + 2 + 2 + 12
TRAILER_SIZE = 8 + 32 + 4  # empty head dims, source hash, CRC
RECORD_DTYPE = np.dtype([("chan", "<u2"), ("pat", "u1")])


@dataclass(eq=False)
class PackedLayer:
    F: int
    C: int
    stride: int
    pad: int
    relu: bool
    pool: int                  # max-pool size after the ReLU, 0 for none
    library: PatternLibrary
    filter_perm: np.ndarray    # [F] packed position -> original filter
    filter_records: np.ndarray  # [F] record count per packed filter
    chan: np.ndarray           # [n] input channel (in the previous layer's packed order)
    pat: np.ndarray            # [n] pattern id into library
    weights: np.ndarray        # [n, 4] float32
    bias: np.ndarray           # [F] float32, packed order

    def __post_init__(self):
        self.filter_perm = np.asarray(self.filter_perm, dtype=np.int64)
        self.filter_records = np.asarray(self.filter_records, dtype=np.int64)
        self.chan = np.asarray(self.chan, dtype=np.int64)
        self.pat = np.asarray(self.pat, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float32).reshape(-1, 4)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        self.validate()

    @property
    def n_records(self) -> int:
        return len(self.chan)

    @cached_property
    def record_ptr(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.filter_records)]).astype(np.int64)

    def validate(self) -> None:
        F, C, n = self.F, self.C, len(self.chan)
        if self.library.K > MAX_K:
            raise ValueError(f"library has {self.library.K} patterns, the format allows at most {MAX_K}")
        if sorted(self.filter_perm.tolist()) != list(range(F)):
            raise ValueError("filter_perm is not a permutation of range(F)")
        if self.filter_records.shape != (F,) or self.filter_records.sum() != n:
            raise ValueError(f"per-filter record counts do not add up to {n} records")
        if len(self.pat) != n or self.weights.shape != (n, 4) or self.bias.shape != (F,):
            raise ValueError("record, weight and bias arrays have inconsistent lengths")
        if n and (self.chan.min() < 0 or self.chan.max() >= C):
            raise ValueError(f"channel index out of range [0, {C})")
        if n and (self.pat.min() < 0 or self.pat.max() >= self.library.K):
            raise ValueError(f"pattern id out of range [0, {self.library.K})")
        ptr = self.record_ptr
        for f in range(F):
            p, c = self.pat[ptr[f] : ptr[f + 1]], self.chan[ptr[f] : ptr[f + 1]]
            if np.any(np.diff(p) < 0):
                raise ValueError(f"filter {f}: records are not grouped by pattern id")
            same = np.diff(p) == 0
            if np.any(np.diff(c)[same] <= 0):
                raise ValueError(f"filter {f}: channels within a pattern group are not strictly increasing")

    def groups(self):
        """Pattern groups as flat arrays (group_ptr, group_pat, filter_group_ptr)."""
        ptr = self.record_ptr
        group_ptr, group_pat, fptr = [0], [], [0]
        for f in range(self.F):
            lo, hi = ptr[f], ptr[f + 1]
            if hi > lo:
                cuts = np.flatnonzero(np.diff(self.pat[lo:hi])) + 1
                starts = np.concatenate([[0], cuts])
                ends = np.concatenate([cuts, [hi - lo]])
                group_ptr += (lo + ends).tolist()
                group_pat += self.pat[lo + starts].tolist()
            fptr.append(len(group_pat))
        return (np.array(group_ptr, dtype=np.int64), np.array(group_pat, dtype=np.int64),
                np.array(fptr, dtype=np.int64))

    def pattern_transitions(self) -> np.ndarray:
        """Number of pattern id changes inside each packed filter's record list."""
        ptr = self.record_ptr
        return np.array([int(np.count_nonzero(np.diff(self.pat[ptr[f] : ptr[f + 1]])))
                         for f in range(self.F)], dtype=np.int64)


@dataclass(eq=False)
class PackedModel:
    input_shape: tuple
    layers: list
    head_weights: np.ndarray | None = None  # [out, in] float32, columns in packed order
    head_bias: np.ndarray | None = None
    source_hash: bytes = field(default=bytes(32))

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.source_hash) != 32:
            raise ValueError("source hash must be 32 bytes")
        c = self.input_shape[0]
        for i, layer in enumerate(self.layers):
            if layer.C != c:
                raise ValueError(f"layer {i} expects {layer.C} channels, previous layer gives {c}")
            c = layer.F
        if self.head_weights is not None:
            self.head_weights = np.asarray(self.head_weights, dtype=np.float32)
            self.head_bias = np.asarray(self.head_bias, dtype=np.float32)

    def __eq__(self, other):
        return isinstance(other, PackedModel) and psp_bytes(self) == psp_bytes(other)

    @property
    def library_id(self) -> str:
        libs = {tuple(l.library.bits) for l in self.layers}
        return ",".join("-".join(map(str, b)) for b in sorted(libs))

    def output_shape(self) -> tuple:
        c, h, w = self.input_shape
        for layer in self.layers:
            h = (h + 2 * layer.pad - 3) // layer.stride + 1
            w = (w + 2 * layer.pad - 3) // layer.stride + 1
            c = layer.F
            if layer.pool:
                h, w = h // layer.pool, w // layer.pool
        if self.head_weights is not None:
            return (self.head_weights.shape[0],)
        return (c, h, w)

    def records(self) -> int:
        return sum(l.n_records for l in self.layers)


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def signatures(indices: np.ndarray, keep: np.ndarray, K: int) -> np.ndarray:
    """[F, K] per-pattern kept-kernel counts."""
    F = indices.shape[0]
    sig = np.zeros((F, K), dtype=np.int64)
    for f in range(F):
        sig[f] = np.bincount(indices[f][keep[f]], minlength=K)[:K]
    return sig


def reorder_filters(indices: np.ndarray, keep: np.ndarray | None, K: int) -> np.ndarray:
    """Filters by descending lexicographic pattern-count signature, ties by index."""
    indices = np.asarray(indices)
    keep = np.ones(indices.shape, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    sig = signatures(indices, keep, K)
    # lexsort: last key is primary
    keys = [np.arange(len(sig))] + [-sig[:, k] for k in range(K - 1, -1, -1)]
    return np.lexsort(keys)


def _layer_plan(net: Network):
    """Group the net into (conv, relu, pool) triples and the head."""
    plan, i, layers = [], 0, net.layers
    while i < len(layers) and isinstance(layers[i], Conv2d):
        conv, relu, pool = layers[i], False, 0
        i += 1
        if i < len(layers) and isinstance(layers[i], ReLU):
            relu, i = True, i + 1
        if i < len(layers) and isinstance(layers[i], MaxPool2d):
            pool, i = layers[i].size, i + 1
        plan.append((conv, relu, pool))
    head = None
    if i < len(layers) and isinstance(layers[i], Linear):
        head, i = layers[i], i + 1
    if i != len(layers):
        raise ValueError(f"cannot pack layer {i} ({type(layers[i]).__name__}): expected "
                         "conv [ReLU] [pool] blocks followed by a linear head")
    return plan, head


def pack(net: Network, library: PatternLibrary, assignment, connectivity: ConnectivityMask | None = None,
         source_hash: bytes = bytes(32)) -> PackedModel:
    if library.K > MAX_K:
        raise ValueError(f"library has {library.K} patterns, packing supports at most {MAX_K}")
    if list(assignment.library.bits) != list(library.bits):
        raise ValueError("assignment refers to a different library")
    plan, head = _layer_plan(net)
    if len(assignment.indices) != len(plan):
        raise ValueError(f"assignment covers {len(assignment.indices)} conv layers, net has {len(plan)}")
    conn = connectivity or ConnectivityMask([np.ones(a.shape, dtype=bool) for a in assignment.indices])
    mm = library.mask_matrix().astype(bool)
    positions = np.array([m.positions for m in library.masks], dtype=np.int64)  # [K, 4]

    packed_layers = []
    prev_perm = np.arange(net.input_shape[0])
    for li, ((conv, relu, pool), idx, keep) in enumerate(zip(plan, assignment.indices, conn.keep)):
        F, C = conv.F, conv.C
        if idx.shape != (F, C) or keep.shape != (F, C):
            raise ValueError(f"layer {li}: assignment {idx.shape} / keep {keep.shape} vs kernels {(F, C)}")
        w = conv.weights.reshape(F, C, 9)
        allowed = mm[idx] & keep[:, :, None]
        bad = np.argwhere((w != 0) & ~allowed)
        if len(bad):
            f, c, p = bad[0]
            raise ValueError(f"layer {li}: kernel ({f}, {c}) has a nonzero weight at position {p} "
                             "outside its pattern mask or connectivity")
        perm = reorder_filters(idx, keep, library.K)
        inv_prev = np.argsort(prev_perm)  # original channel -> packed channel
        chans, pats, wts, counts = [], [], [], []
        for f in perm:
            orig_c = np.flatnonzero(keep[f])
            new_c = inv_prev[orig_c]
            order = np.lexsort((new_c, idx[f, orig_c]))
            oc, nc = orig_c[order], new_c[order]
            p = idx[f, oc]
            chans.append(nc)
            pats.append(p)
            wts.append(np.take_along_axis(w[f, oc], positions[p], axis=1))
            counts.append(len(oc))
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
        packed_layers.append(PackedLayer(
            F, C, conv.stride, conv.pad, relu, pool, library, perm, counts,
            cat(chans, 0), cat(pats, 0), cat(wts, (0, 4)), conv.bias[perm]))
        prev_perm = perm

    hw = hb = None
    if head is not None:
        c_last = plan[-1][0].F if plan else net.input_shape[0]
        spatial = head.weights.shape[1] // c_last
        cols = (prev_perm[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
        hw, hb = head.weights[:, cols], head.bias
    return PackedModel(net.input_shape, packed_layers, hw, hb, source_hash)


def packed_assignment(packed: PackedModel):
    """(Assignment, ConnectivityMask) in original filter/channel order; pruned kernels get pattern 0."""
    from .admm import Assignment

    indices, keeps = [], []
    prev_perm = np.arange(packed.input_shape[0])
    lib = None
    for layer in packed.layers:
        idx = np.zeros((layer.F, layer.C), dtype=np.int64)
        keep = np.zeros((layer.F, layer.C), dtype=bool)
        ptr = layer.record_ptr
        for pf, f in enumerate(layer.filter_perm):
            oc = prev_perm[layer.chan[ptr[pf] : ptr[pf + 1]]]
            idx[f, oc] = layer.pat[ptr[pf] : ptr[pf + 1]]
            keep[f, oc] = True
        indices.append(idx)
        keeps.append(keep)
        prev_perm = layer.filter_perm
        lib = layer.library
    if lib is None:
        raise ValueError("packed model has no conv layers")
    return Assignment(lib, indices), ConnectivityMask(keeps)


def unpack(packed: PackedModel) -> Network:
    """Dense network in the original filter order, zeros at pruned positions."""
    layers = []
    prev_perm = np.arange(packed.input_shape[0])
    for layer in packed.layers:
        w = np.zeros((layer.F, layer.C, 9), dtype=np.float64)
        positions = np.array([m.positions for m in layer.library.masks], dtype=np.int64)
        ptr = layer.record_ptr
        bias = np.zeros(layer.F)
        for pf, f in enumerate(layer.filter_perm):
            lo, hi = ptr[pf], ptr[pf + 1]
            oc = prev_perm[layer.chan[lo:hi]]
            w[f, oc[:, None], positions[layer.pat[lo:hi]]] = layer.weights[lo:hi]
            bias[f] = layer.bias[pf]
        layers.append(Conv2d(w.reshape(layer.F, layer.C, 3, 3), bias, layer.stride, layer.pad))
        if layer.relu:
            layers.append(ReLU())
        if layer.pool:
            layers.append(MaxPool2d(layer.pool))
        prev_perm = layer.filter_perm
    if packed.head_weights is None:
        raise ValueError("packed model has no classifier head; use unpack_layers")
    c_last = packed.layers[-1].F if packed.layers else packed.input_shape[0]
    spatial = packed.head_weights.shape[1] // c_last
    cols = (prev_perm[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
    hw = np.zeros(packed.head_weights.shape, dtype=np.float64)
    hw[:, cols] = packed.head_weights
    layers.append(Linear(hw, packed.head_bias.astype(np.float64)))
    return Network(layers, packed.input_shape)


def unpack_layers(packed: PackedModel) -> list:
    """Dense ``(weights, bias, stride, pad, relu, pool)`` per layer in original order (head ignored)."""
    if packed.head_weights is not None:
        net = unpack(packed)
        convs = iter(net.convs)
    else:
        dummy = PackedModel(packed.input_shape, packed.layers,
                            np.zeros((1, int(np.prod(packed.output_shape()))), np.float32),
                            np.zeros(1, np.float32))
        convs = iter(unpack(dummy).convs)
    return [(c.weights, c.bias, l.stride, l.pad, l.relu, l.pool) for c, l in zip(convs, packed.layers)]


# ---------------------------------------------------------------------------
# .psp serialization
# ---------------------------------------------------------------------------

def psp_bytes(packed: PackedModel) -> bytes:
    out = io.BytesIO()
    out.write(PSP_MAGIC + struct.pack("<HH", PSP_VERSION, len(packed.layers)))
    out.write(struct.pack("<3I", *packed.input_shape))
    for l in packed.layers:
        out.write(struct.pack("<2I4BB", l.F, l.C, l.stride, l.pad, int(l.relu), l.pool, l.library.K))
        out.write(np.asarray(l.library.bits, dtype="<u2").tobytes())
        out.write(l.filter_perm.astype("<u4").tobytes())
        out.write(l.filter_records.astype("<u4").tobytes())
        out.write(struct.pack("<I", l.n_records))
        rec = np.empty(l.n_records, dtype=RECORD_DTYPE)
        rec["chan"], rec["pat"] = l.chan, l.pat
        out.write(rec.tobytes())
        out.write(l.weights.astype("<f4").tobytes())
        out.write(l.bias.astype("<f4").tobytes())
    if packed.head_weights is None:
        out.write(struct.pack("<2I", 0, 0))
    else:
        out.write(struct.pack("<2I", *packed.head_weights.shape))
        out.write(packed.head_weights.astype("<f4").tobytes() + packed.head_bias.astype("<f4").tobytes())
    out.write(packed.source_hash)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Cursor:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.what}: truncated: expected at least {self.pos + n} bytes, "
                             f"file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, n):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt)


def psp_from_bytes(data: bytes, what: str = "psp", check_crc: bool = True) -> PackedModel:
    cur = _Cursor(data, what)
    if cur.take(4) != PSP_MAGIC:
        raise ValueError(f"{what}: bad magic, not a .psp file")
    version, n_layers = cur.unpack("HH")
    if version != PSP_VERSION:
        raise ValueError(f"{what}: unsupported version {version} (this reader handles {PSP_VERSION})")
    input_shape = cur.unpack("3I")
    layers = []
    for i in range(n_layers):
        F, C, stride, pad, flags, pool, K = cur.unpack("2I4BB")
        if not 1 <= K <= MAX_K:
            raise ValueError(f"{what}: layer {i} has K={K}, expected 1..{MAX_K}")
        library = PatternLibrary.from_bits(cur.array("<u2", K).tolist())
        perm = cur.array("<u4", F)
        counts = cur.array("<u4", F)
        (n,) = cur.unpack("I")
        rec = cur.array(RECORD_DTYPE, n)
        wts = cur.array("<f4", 4 * n).reshape(n, 4)
        bias = cur.array("<f4", F)
        try:
            layers.append(PackedLayer(F, C, stride, pad, bool(flags & 1), pool, library, perm, counts,
                                      rec["chan"], rec["pat"], wts, bias))
        except ValueError as e:
            raise ValueError(f"{what}: layer {i}: {e}") from None
    out_dim, in_dim = cur.unpack("2I")
    hw = hb = None
    if out_dim or in_dim:
        hw = cur.array("<f4", out_dim * in_dim).reshape(out_dim, in_dim)
        hb = cur.array("<f4", out_dim)
    source_hash = cur.take(32)
    body_len = cur.pos
    (crc,) = cur.unpack("I")
    if cur.pos != len(data):
        raise ValueError(f"{what}: expected {cur.pos} bytes, file has {len(data)}")
    if check_crc and zlib.crc32(data[:body_len]) != crc:
        raise ValueError(f"{what}: CRC mismatch, file is corrupted")
    return PackedModel(input_shape, layers, hw, hb, source_hash)


def write_psp(path, packed: PackedModel) -> None:
    Path(path).write_bytes(psp_bytes(packed))


def read_psp(path, check_crc: bool = True) -> PackedModel:
    return psp_from_bytes(Path(path).read_bytes(), str(path), check_crc)
