"""Datasets: a synthetic Gaussian-blob generator and an IDX (MNIST) reader."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, BadSpec, CountMismatch, Truncated
from .rng import seed_from

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise BadSpec(f"features {X.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise BadSpec(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _class_means(d: int, num_classes: int, separation: float, seed: int) -> np.ndarray:
    rng = seed_from(seed, [0])
    means = np.empty((num_classes, d))
    for k in range(num_classes):
        while True:
            v = rng.normal_array(d)
            norm = float(np.linalg.norm(v))
            if norm > 0.0:
                break
        means[k] = separation * v / norm
    return means


def synth_classification(n: int, d: int, num_classes: int, separation: float, seed: int,
                         split: int = 0) -> Dataset:
    """Gaussian blobs around class means placed on a sphere of radius ``separation``.

    Class means depend only on ``(d, num_classes, separation, seed)``; ``split``
    selects an independent sample stream, so ``split=1`` yields a held-out set
    drawn from the same distribution.
    """
    if num_classes < 2 or n < num_classes or d < 1:
        raise BadSpec(f"need n >= num_classes >= 2 and d >= 1 (n={n}, c={num_classes}, d={d})")
    if separation < 0:
        raise BadSpec(f"separation must be >= 0, got {separation}")
    means = _class_means(d, num_classes, separation, seed)
    rng = seed_from(seed, [1 + split])
    labels = [i % num_classes for i in range(n)]
    rng.shuffle(labels)
    y = np.asarray(labels, dtype=np.int64)
    noise = rng.normal_array(n * d).reshape(n, d)
    return Dataset(means[y] + noise, y, num_classes)


def _read_idx(path: str, magic_expected: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise Truncated(f"{path}: {len(raw)} bytes cannot hold an IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != magic_expected:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{magic_expected:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims, dtype=np.int64))
    start = 4 + 4 * ndim
    if len(raw) - start < count:
        raise Truncated(f"{path}: header declares {count} bytes of data, {len(raw) - start} present")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=start).reshape(dims)
    return dims, data


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to ``[0, 1]``."""
    img_dims, images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if img_dims[0] != n_labels:
        raise CountMismatch(f"{img_dims[0]} images but {n_labels} labels")
    X = images.reshape(img_dims[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, num_classes)


def write_idx(path: str, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (1-dim labels or 3-dim images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise BadSpec(f"IDX writer supports 1-d or 3-d arrays, got {array.ndim}-d")
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def load_mnist_dir(directory: str, split: str = "train") -> Dataset:
    images, labels = MNIST_FILES[split]
    return load_idx(os.path.join(directory, images), os.path.join(directory, labels), num_classes=10)
