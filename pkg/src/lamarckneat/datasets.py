"""Benchmark loaders (IDX, amat), a synthetic Rectangles generator, splits and batching.

IDX layout (big-endian): a 4-byte magic (0x00000803 for uint8 image stacks,
0x00000801 for uint8 label vectors), one uint32 per dimension, then the raw
bytes in row-major order. amat layout: one sample per line, 784
whitespace-separated pixel values in [0, 1] followed by the label.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SIDE = 28


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # N x H x W x C, float32 in [0, 1]
    labels: np.ndarray   # N, int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be NxHxWxC, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]),
                       max(self.num_classes, other.num_classes))


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DatasetError(f"{path}: truncated payload, expected {count} bytes, got {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected a 3-d image stack, got {images.ndim} dims")
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    labels = labels.astype(np.int64)
    n_cls = num_classes or (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset((images.astype(np.float32) / 255.0)[..., None], labels, n_cls)


def load_amat(path, num_classes: Optional[int] = None, side: int = IMAGE_SIDE) -> Dataset:
    n_pixels = side * side
    rows = []
    labels = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != n_pixels + 1:
                raise DatasetError(f"{path}:{lineno}: expected {n_pixels + 1} columns, got {len(fields)}")
            values = np.array(fields, dtype=np.float64)
            rows.append(values[:n_pixels])
            labels.append(int(round(values[n_pixels])))
    if not rows:
        raise DatasetError(f"{path}: no samples")
    images = np.asarray(rows, dtype=np.float32).reshape(-1, side, side, 1)
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(images, labels, num_classes or int(labels.max()) + 1)


def gen_rectangles(n: int, rng: np.random.Generator, side: int = IMAGE_SIDE,
                   size_range: tuple[int, int] = (3, 25), return_sizes: bool = False):
    """Rectangle outlines on black; label 1 iff the rectangle is wider than tall."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = size_range
    images = np.zeros((n, side, side, 1), dtype=np.float32)
    sizes = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        while True:
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            if w != h:
                break
        x = int(rng.integers(0, side - w + 1))
        y = int(rng.integers(0, side - h + 1))
        img = images[i, :, :, 0]
        img[y, x:x + w] = 1.0
        img[y + h - 1, x:x + w] = 1.0
        img[y:y + h, x] = 1.0
        img[y:y + h, x + w - 1] = 1.0
        sizes[i] = (w, h)
    labels = (sizes[:, 0] > sizes[:, 1]).astype(np.int64)
    ds = Dataset(images, labels, 2)
    return (ds, sizes) if return_sizes else ds


def split_train_val(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    if len(ds) < 5:
        raise ValueError("need at least 5 samples to split")
    order = np.random.default_rng(spec.seed).permutation(len(ds))
    n_val = int(round(spec.validation_fraction * len(ds)))
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """First ``n`` samples of a seeded permutation (the whole set if n >= len)."""
    if n >= len(ds):
        return ds
    order = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.subset(np.sort(order))


def batches(ds: Dataset, batch_size: int, shuffle: bool = False,
            rng: Optional[np.random.Generator] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(ds))
    for s in range(0, len(ds), batch_size):
        idx = order[s:s + batch_size]
        yield ds.images[idx], ds.labels[idx]
