"""Datasets: IDX (MNIST-compatible) ubyte files and a seeded synthetic blob generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass
class Dataset:
    inputs: np.ndarray  # [B, C, H, W] float64
    labels: np.ndarray  # [B] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be [B, C, H, W], got {self.inputs.shape}")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.labels)} labels for {len(self.inputs)} inputs")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, n):
        return Dataset(self.inputs[:n], self.labels[:n], self.num_classes, self.split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE:
        raise ValueError(f"{path}: only unsigned-byte IDX files are supported")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    expected = int(np.prod(dims)) if dims else 1
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx_dataset(directory, split="train", num_classes=None, limit=None) -> Dataset:
    directory = Path(directory)
    img_name, lbl_name = (TRAIN_IMAGES, TRAIN_LABELS) if split == "train" else (TEST_IMAGES, TEST_LABELS)
    images = read_idx(directory / img_name)
    labels = read_idx(directory / lbl_name).astype(np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if images.ndim == 3:
        images = images[:, None]
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(pixels_to_inputs(images), labels, num_classes, split)


def pixels_to_inputs(pixels: np.ndarray) -> np.ndarray:
    """ubyte pixels -> float64 in [-1, 1] (zero-centred so first-layer ReLUs do not start dead)."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def inputs_to_pixels(inputs: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(inputs) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_idx_dataset(directory, train: Dataset, test: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ds, (img_name, lbl_name) in ((train, (TRAIN_IMAGES, TRAIN_LABELS)),
                                     (test, (TEST_IMAGES, TEST_LABELS))):
        imgs = inputs_to_pixels(ds.inputs[:, 0])
        write_idx(directory / img_name, imgs)
        write_idx(directory / lbl_name, ds.labels)


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

def _class_templates(rng, num_classes, size, blobs_per_class):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = []
    for _ in range(num_classes):
        img = np.zeros((size, size))
        for _ in range(blobs_per_class):
            cy, cx = rng.uniform(3, size - 4, size=2)
            sy, sx = rng.uniform(1.0, 2.5, size=2)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 / (2 * sy ** 2) + (xx - cx) ** 2 / (2 * sx ** 2)))
        templates.append(img)
    return templates


def synthetic_blobs(n_train=2000, n_test=500, num_classes=4, size=16, seed=42,
                    noise=0.25, jitter=2, blobs_per_class=3) -> tuple[Dataset, Dataset]:
    """Seeded image classification task on ``size`` x ``size`` single-channel images.

    Each class owns a template made of a few signed Gaussian blobs. Samples are
    the class template shifted by up to ``jitter`` pixels, scaled by a random
    gain and corrupted by Gaussian noise, then quantized to ubyte pixels so
    they survive the IDX round trip exactly.
    """
    rng = np.random.default_rng(seed)
    templates = _class_templates(rng, num_classes, size, blobs_per_class)

    def draw(n):
        labels = rng.integers(0, num_classes, size=n)
        imgs = np.empty((n, 1, size, size))
        for i, lab in enumerate(labels):
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            img = np.roll(templates[lab], (dy, dx), axis=(0, 1))
            img = img * rng.uniform(0.7, 1.3) + noise * rng.standard_normal((size, size))
            imgs[i, 0] = img
        return imgs, labels

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    quantize = lambda a: pixels_to_inputs(inputs_to_pixels(a / 1.5))
    return (Dataset(quantize(xtr), ytr, num_classes, "train"),
            Dataset(quantize(xte), yte, num_classes, "test"))
