"""Binary model (.pnm) and assignment (.pas) files. All integers little-endian.

``.pnm``::

    "PNM1"  u32 layer_count  u32 C u32 H u32 W           (input shape)
    per layer: u8 kind, then
        conv    (0): u32 F, u32 C, u32 stride, u32 pad, f32 weights[F*C*9], f32 bias[F],
                     u8 has_mask, [f32 mask[F*C*9]]
        relu    (1): nothing
        maxpool (2): u32 size
        linear  (3): u32 out, u32 in, f32 weights[out*in], f32 bias[out]

``.pas``::

    "PAS1"  u32 json_len  library JSON
    u32 layer_count, per layer: u32 F, u32 C, then F*C pairs (u8 kept, u8 pattern)

Weights are stored as 32-bit floats and widened to float64 on load, so a
model survives any number of save/load cycles after the first unchanged.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .admm import Assignment
from .connectivity import ConnectivityMask
from .nn import Conv2d, Linear, MaxPool2d, Network, ReLU
from .patterns import PatternLibrary

PNM_MAGIC = b"PNM1"
PAS_MAGIC = b"PAS1"
KIND_CONV, KIND_RELU, KIND_POOL, KIND_LINEAR = 0, 1, 2, 3


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.what}: truncated at offset {self.pos}: need {n} more bytes, "
                             f"{len(self.data) - self.pos} available")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)

    def done(self):
        if self.pos != len(self.data):
            raise ValueError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def model_to_bytes(net: Network) -> bytes:
    out = io.BytesIO()
    out.write(PNM_MAGIC)
    out.write(struct.pack("<I3I", len(net.layers), *net.input_shape))
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            out.write(struct.pack("<B4I", KIND_CONV, layer.F, layer.C, layer.stride, layer.pad))
            out.write(_f32(layer.weights) + _f32(layer.bias))
            out.write(struct.pack("<B", layer.mask is not None))
            if layer.mask is not None:
                out.write(_f32(layer.mask))
        elif isinstance(layer, ReLU):
            out.write(struct.pack("<B", KIND_RELU))
        elif isinstance(layer, MaxPool2d):
            out.write(struct.pack("<BI", KIND_POOL, layer.size))
        elif isinstance(layer, Linear):
            o, i = layer.weights.shape
            out.write(struct.pack("<B2I", KIND_LINEAR, o, i))
            out.write(_f32(layer.weights) + _f32(layer.bias))
        else:
            raise TypeError(f"cannot serialize {layer!r}")
    return out.getvalue()


def model_from_bytes(data: bytes, what: str = "model") -> Network:
    r = _Reader(data, what)
    if r.take(4) != PNM_MAGIC:
        raise ValueError(f"{what}: bad magic, not a .pnm file")
    n, c, h, w = r.unpack("I3I")
    layers = []
    for _ in range(n):
        (kind,) = r.unpack("B")
        if kind == KIND_CONV:
            f, ch, stride, pad = r.unpack("4I")
            wts = r.floats(f * ch * 9).reshape(f, ch, 3, 3)
            bias = r.floats(f)
            (has_mask,) = r.unpack("B")
            mask = r.floats(f * ch * 9).reshape(f, ch, 3, 3) if has_mask else None
            layers.append(Conv2d(wts, bias, stride, pad, mask))
        elif kind == KIND_RELU:
            layers.append(ReLU())
        elif kind == KIND_POOL:
            layers.append(MaxPool2d(r.unpack("I")[0]))
        elif kind == KIND_LINEAR:
            o, i = r.unpack("2I")
            layers.append(Linear(r.floats(o * i).reshape(o, i), r.floats(o)))
        else:
            raise ValueError(f"{what}: unknown layer kind {kind} at offset {r.pos - 1}")
    r.done()
    return Network(layers, (c, h, w))


def save_model(net: Network, path) -> None:
    Path(path).write_bytes(model_to_bytes(net))


def load_model(path) -> Network:
    return model_from_bytes(Path(path).read_bytes(), str(path))


def quantize_model(net: Network) -> Network:
    """Round-trip through the file format (weights rounded to float32)."""
    return model_from_bytes(model_to_bytes(net))


def assignment_to_bytes(assignment: Assignment, conn: ConnectivityMask | None = None) -> bytes:
    blob = assignment.library.to_json().encode()
    out = io.BytesIO()
    out.write(PAS_MAGIC + struct.pack("<I", len(blob)) + blob)
    out.write(struct.pack("<I", len(assignment.indices)))
    for i, idx in enumerate(assignment.indices):
        keep = np.ones(idx.shape, dtype=bool) if conn is None else conn.keep[i]
        if keep.shape != idx.shape:
            raise ValueError(f"layer {i}: connectivity {keep.shape} vs assignment {idx.shape}")
        out.write(struct.pack("<2I", *idx.shape))
        pairs = np.stack([keep.astype(np.uint8), idx.astype(np.uint8)], axis=-1)
        out.write(pairs.tobytes())
    return out.getvalue()


def assignment_from_bytes(data: bytes, what: str = "assignment") -> tuple[Assignment, ConnectivityMask]:
    r = _Reader(data, what)
    if r.take(4) != PAS_MAGIC:
        raise ValueError(f"{what}: bad magic, not a .pas file")
    (n,) = r.unpack("I")
    library = PatternLibrary.from_json(r.take(n).decode())
    (layers,) = r.unpack("I")
    indices, keeps = [], []
    for _ in range(layers):
        f, c = r.unpack("2I")
        pairs = np.frombuffer(r.take(2 * f * c), dtype=np.uint8).reshape(f, c, 2)
        keeps.append(pairs[..., 0] != 0)
        indices.append(pairs[..., 1].astype(np.int64))
    r.done()
    return Assignment(library, indices), ConnectivityMask(keeps)


def save_assignment(path, assignment: Assignment, conn: ConnectivityMask | None = None) -> None:
    Path(path).write_bytes(assignment_to_bytes(assignment, conn))


def load_assignment(path) -> tuple[Assignment, ConnectivityMask]:
    return assignment_from_bytes(Path(path).read_bytes(), str(path))
