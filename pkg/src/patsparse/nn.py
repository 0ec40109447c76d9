"""Minimal dense CNN: 3x3 conv, ReLU, 2x2 max-pool, linear head, cross-entropy, SGD.

Training runs in float64. Conv weights use the filter-major layout
``[F, C, 3, 3]``; flattening a kernel row-major gives the 9 positions in mask
bit order.

Patterned training is expressed through :class:`KernelSelection`: for every
conv layer a ``[F, C, K]`` array of selection weights ``z`` and a shared
``[K, 9]`` mask matrix. The layer then runs with the effective kernel
``W * (z @ masks)`` and SGD updates both ``W`` and ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .patterns import PatternLibrary


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, seed=None, batch=None, snapshot=None):
        super().__init__(message)
        self.seed = seed
        self.batch = batch
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class Conv2d:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 1
    mask: Optional[np.ndarray] = None  # hard 0/1 mask, same shape as weights

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ValueError(f"conv weights must be [F, C, 3, 3], got {self.weights.shape}")
        f, c = self.weights.shape[:2]
        if f < 1 or c < 1:
            raise ValueError("conv layer needs F, C >= 1")
        if self.bias.shape != (f,):
            raise ValueError(f"bias shape {self.bias.shape} does not match F={f}")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("stride must be positive and pad non-negative")

    @property
    def F(self):
        return self.weights.shape[0]

    @property
    def C(self):
        return self.weights.shape[1]

    def out_hw(self, h, w):
        return ((h + 2 * self.pad - 3) // self.stride + 1,
                (w + 2 * self.pad - 3) // self.stride + 1)


@dataclass
class ReLU:
    pass


@dataclass
class MaxPool2d:
    size: int = 2


@dataclass
class Linear:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("linear bias does not match output size")


# ---------------------------------------------------------------------------
# Functional conv
# ---------------------------------------------------------------------------

def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, layer: Conv2d, weights: np.ndarray | None = None,
                   return_cols: bool = False):
    """Direct cross-correlation plus bias. ``weights`` overrides the layer's kernels."""
    w = layer.weights if weights is None else weights
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"input shape {tuple(x.shape)} incompatible with conv weights {tuple(w.shape)}")
    b, c, h, wd = x.shape
    ho, wo = layer.out_hw(h, wd)
    if ho < 1 or wo < 1:
        raise ValueError(f"input shape {tuple(x.shape)} too small for conv weights {tuple(w.shape)}")
    xp = _pad(x, layer.pad)
    cols = kernels.im2col(xp, layer.stride, ho, wo).reshape(b, c * 9, ho * wo)
    out = np.matmul(w.reshape(w.shape[0], c * 9), cols)
    out += layer.bias[None, :, None]
    out = out.reshape(b, w.shape[0], ho, wo)
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, layer: Conv2d, dout: np.ndarray,
                    weights: np.ndarray | None = None, cols: np.ndarray | None = None):
    """Gradients ``(dx, dW, db)`` of a scalar loss given ``dout = dL/d(output)``."""
    w = layer.weights if weights is None else weights
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"input shape {tuple(x.shape)} incompatible with conv weights {tuple(w.shape)}")
    b, c, h, wd = x.shape
    f = w.shape[0]
    ho, wo = layer.out_hw(h, wd)
    if dout.shape != (b, f, ho, wo):
        raise ValueError(f"upstream gradient shape {tuple(dout.shape)} != output shape {(b, f, ho, wo)}")
    if cols is None:
        cols = kernels.im2col(_pad(x, layer.pad), layer.stride, ho, wo).reshape(b, c * 9, ho * wo)
    g = dout.reshape(b, f, ho * wo)
    dw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = g.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(f, c * 9).T, g).reshape(b, c, 9, ho * wo)
    hp, wp = h + 2 * layer.pad, wd + 2 * layer.pad
    dxp = kernels.col2im(np.ascontiguousarray(dcols), hp, wp, layer.stride, ho, wo)
    dx = dxp[:, :, layer.pad : layer.pad + h, layer.pad : layer.pad + wd]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# Pattern-weighted kernels
# ---------------------------------------------------------------------------

def masked_effective_kernel(weights: np.ndarray, z: np.ndarray, library: PatternLibrary) -> np.ndarray:
    """``weights * sum_j z_j M_j`` for a single 3x3 kernel."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (library.K,):
        raise ValueError(f"selection vector has length {z.shape}, library has K={library.K}")
    coverage = (z @ library.mask_matrix()).reshape(3, 3)
    return np.asarray(weights, dtype=np.float64).reshape(3, 3) * coverage


def masked_effective_kernel_grad(weights, z, library, dkernel):
    """Gradients ``(dW, dz)`` of a scalar loss through :func:`masked_effective_kernel`."""
    m = library.mask_matrix()
    w = np.asarray(weights, dtype=np.float64).reshape(9)
    g = np.asarray(dkernel, dtype=np.float64).reshape(9)
    coverage = np.asarray(z, dtype=np.float64) @ m
    return (g * coverage).reshape(3, 3), m @ (g * w)


def effective_kernels(w: np.ndarray, z: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Batched version: ``w`` [F, C, 3, 3], ``z`` [F, C, K], ``masks`` [K, 9]."""
    return w * (z @ masks).reshape(w.shape)


def effective_kernels_grad(w, z, masks, dkernel):
    f, c = w.shape[:2]
    coverage = (z @ masks).reshape(w.shape)
    dw = dkernel * coverage
    dz = (dkernel * w).reshape(f, c, 9) @ masks.T
    return dw, dz


@dataclass
class KernelSelection:
    """Per-conv-layer selection weights over a shared pattern library."""
    library: PatternLibrary
    z: list  # one [F, C, K] array per conv layer, in network order

    def __post_init__(self):
        self.masks = self.library.mask_matrix()
        for zi in self.z:
            if zi.shape[-1] != self.library.K:
                raise ValueError(f"selection arrays must end in K={self.library.K}, got {zi.shape}")


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """Sequential stack of Conv2d / ReLU / MaxPool2d layers ending in one Linear head."""

    def __init__(self, layers: list, input_shape: tuple[int, int, int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self._check()

    def _check(self):
        c, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if layer.C != c:
                    raise ValueError(f"layer {i}: conv expects {layer.C} channels, receives {c}")
                h, w = layer.out_hw(h, w)
                c = layer.F
            elif isinstance(layer, MaxPool2d):
                h, w = h // layer.size, w // layer.size
            elif isinstance(layer, Linear):
                if i != len(self.layers) - 1:
                    raise ValueError("the linear classifier must be the last layer")
                if layer.weights.shape[1] != c * h * w:
                    raise ValueError(
                        f"classifier expects {layer.weights.shape[1]} inputs, features have {c * h * w}")
            elif not isinstance(layer, ReLU):
                raise TypeError(f"unsupported layer {layer!r}")
            if h < 1 or w < 1:
                raise ValueError(f"layer {i}: spatial size collapsed to {h}x{w}")
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ValueError("network must end with a linear classifier")

    @property
    def convs(self) -> list[Conv2d]:
        return [l for l in self.layers if isinstance(l, Conv2d)]

    @property
    def head(self) -> Linear:
        return self.layers[-1]

    def params(self):
        """All parameter arrays in a fixed order (weights, bias per layer)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, (Conv2d, Linear)):
                out += [layer.weights, layer.bias]
        return out

    def copy(self) -> "Network":
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                layers.append(Conv2d(layer.weights.copy(), layer.bias.copy(), layer.stride, layer.pad,
                                     None if layer.mask is None else layer.mask.copy()))
            elif isinstance(layer, Linear):
                layers.append(Linear(layer.weights.copy(), layer.bias.copy()))
            else:
                layers.append(type(layer)(**layer.__dict__))
        return Network(layers, self.input_shape)

    def forward(self, x, selection: KernelSelection | None = None, cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        tape = []
        ci = 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                w_eff = layer.weights
                if selection is not None:
                    w_eff = effective_kernels(layer.weights, selection.z[ci], selection.masks)
                y, cols = conv2d_forward(x, layer, w_eff, return_cols=True)
                tape.append((layer, x, cols, w_eff, ci))
                ci += 1
            elif isinstance(layer, ReLU):
                y = np.maximum(x, 0.0)
                tape.append((layer, y))
            elif isinstance(layer, MaxPool2d):
                y, arg = _maxpool_forward(x, layer.size)
                tape.append((layer, x.shape, arg))
            else:
                xf = x.reshape(x.shape[0], -1)
                y = xf @ layer.weights.T + layer.bias
                tape.append((layer, xf, x.shape))
            x = y
        if cache:
            self._tape = tape
        return x

    def backward(self, dlogits, selection: KernelSelection | None = None):
        """Returns (grads aligned with :meth:`params`, grads for ``selection.z`` or None)."""
        tape = self._tape
        grads = []
        dz = [None] * len(selection.z) if selection is not None else None
        g = dlogits
        for entry in reversed(tape):
            layer = entry[0]
            if isinstance(layer, Linear):
                _, xf, shp = entry
                grads.append(g.sum(axis=0))
                grads.append(g.T @ xf)
                g = (g @ layer.weights).reshape(shp)
            elif isinstance(layer, ReLU):
                g = g * (entry[1] > 0)
            elif isinstance(layer, MaxPool2d):
                _, shp, arg = entry
                g = _maxpool_backward(g, shp, arg, layer.size)
            else:
                _, x, cols, w_eff, ci = entry
                dx, dw, db = conv2d_backward(x, layer, g, w_eff, cols)
                if selection is not None:
                    dw, dz[ci] = effective_kernels_grad(layer.weights, selection.z[ci], selection.masks, dw)
                if layer.mask is not None:
                    dw = dw * layer.mask
                grads.append(db)
                grads.append(dw)
                g = dx
        grads.reverse()
        return grads, dz

    def predict(self, x, selection=None, batch_size=256):
        out = [self.forward(x[i : i + batch_size], selection).argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)


def _maxpool_forward(x, size):
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    xr = x[:, :, : ho * size, : wo * size].reshape(b, c, ho, size, wo, size)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = xr.argmax(axis=-1)
    return np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0], arg


def _maxpool_backward(g, shape, arg, size):
    b, c, h, w = shape
    ho, wo = g.shape[2:]
    buf = np.zeros((b, c, ho, wo, size * size))
    np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
    buf = buf.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * size, wo * size)
    out = np.zeros(shape)
    out[:, :, : ho * size, : wo * size] = buf
    return out


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------------------
# Construction and training
# ---------------------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_layer(rng, c_in, c_out, stride=1, pad=1) -> Conv2d:
    return Conv2d(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), np.zeros(c_out), stride, pad)


def toy_network(input_shape=(1, 16, 16), num_classes=4, seed=42, widths=(8, 16, 16)) -> Network:
    """conv(C->8)-ReLU-pool-conv(8->16)-ReLU-pool-conv(16->16)-ReLU-linear."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for i, width in enumerate(widths):
        layers += [conv_layer(rng, c, width), ReLU()]
        c = width
        if i < len(widths) - 1:
            layers.append(MaxPool2d(2))
            h, w = h // 2, w // 2
    feat = c * h * w
    layers.append(Linear(kaiming_uniform(rng, (num_classes, feat), feat, gain=1.0), np.zeros(num_classes)))
    return Network(layers, input_shape)


ExtraLoss = Callable[[KernelSelection], tuple]


def train_epoch(net: Network, data, lr: float, extra_loss: ExtraLoss | None = None, *,
                selection: KernelSelection | None = None, batch_size: int = 32,
                seed: int = 0, weight_decay: float = 0.0, selection_lr: float | None = None,
                zero_task_grad: bool = False) -> dict:
    """One pass of mini-batch SGD over ``data`` in a seeded shuffled order.

    ``extra_loss(selection)`` returns ``(value, [dL/dz per layer])`` and is
    added to the task loss; it requires ``selection``. ``weight_decay`` is an
    L2 penalty on conv and linear weights (not biases, not selections).
    ``selection_lr`` is the step size for ``z`` (defaults to ``lr``). Conv
    layers carrying a hard ``mask`` keep zero weight outside the mask.
    """
    if extra_loss is not None and selection is None:
        raise ValueError("extra_loss needs a selection to act on")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    params = net.params()
    total, correct, seen = 0.0, 0, 0
    nb = 0
    for bi, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        x, y = data.inputs[idx], data.labels[idx]
        logits = net.forward(x, selection, cache=True)
        loss, dlogits = cross_entropy(logits, y)
        if zero_task_grad:
            dlogits = np.zeros_like(dlogits)
        grads, dz = net.backward(dlogits, selection)
        if extra_loss is not None:
            extra, dz_extra = extra_loss(selection)
            loss = loss + extra
            dz = [a + b for a, b in zip(dz, dz_extra)]
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} (seed {seed}, batch {bi})", seed=seed, batch=bi)
        if weight_decay:
            for p, g in zip(params[0::2], grads[0::2]):
                g += weight_decay * p
        for p, g in zip(params, grads):
            p -= lr * g
        if selection is not None:
            zlr = lr if selection_lr is None else selection_lr
            for zi, gi in zip(selection.z, dz):
                zi -= zlr * gi
        total += loss * len(idx)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(idx)
        nb += 1
    return {"loss": total / max(seen, 1), "accuracy": correct / max(seen, 1), "batches": nb}


def evaluate(net: Network, data, selection=None) -> float:
    return float((net.predict(data.inputs, selection) == data.labels).mean())


def apply_hard_masks(net: Network, masks: list) -> None:
    """Attach 0/1 masks to the conv layers and zero the weights outside them."""
    for layer, m in zip(net.convs, masks):
        layer.mask = np.asarray(m, dtype=np.float64)
        layer.weights *= layer.mask
