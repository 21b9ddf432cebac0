"""Seeded synthetic image-classification data and its raw file format.

File layout (little-endian)::

    magic  b"EVDS"
    uint32 height, width, channels, count, classes, n_val
    float32 images[count, height, width, channels]
    uint8   labels[count]

The last ``n_val`` examples form the validation split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EVDS"
_HEADER = struct.Struct("<4s6I")

PATTERNS = ("stripes_h", "stripes_v", "checker", "blob", "gradient", "stripes_d", "ring", "corner")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.train_x.astype(dtype), self.train_y, self.val_x.astype(dtype),
                       self.val_y, self.num_classes)


def _pattern(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(size / 5, size / 3)
    if kind == "stripes_h":
        img = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
    elif kind == "stripes_v":
        img = 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
    elif kind == "stripes_d":
        img = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / (1.4 * period) + phase)
    elif kind == "checker":
        cell = int(rng.integers(2, max(3, size // 4) + 1))
        ox, oy = rng.integers(0, cell, size=2)
        img = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(float)
    elif kind == "blob":
        cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
        r = rng.uniform(size / 8, size / 4)
        img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    elif kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = (np.cos(ang) * (xx - size / 2) + np.sin(ang) * (yy - size / 2)) / size
        img = np.clip(0.5 + t, 0, 1)
    elif kind == "ring":
        cx, cy = rng.uniform(size * 0.35, size * 0.65, size=2)
        r = rng.uniform(size / 5, size / 3)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img = np.exp(-((d - r) ** 2) / 2.0)
    elif kind == "corner":
        q = int(rng.integers(4))
        img = np.zeros((size, size))
        h = size // 2
        img[(q // 2) * h:(q // 2 + 1) * h, (q % 2) * h:(q % 2 + 1) * h] = 1.0
    else:
        raise ValueError(kind)
    return img


def make_synthetic(
    num_classes: int = 4,
    size: int = 16,
    n: int = 2000,
    channels: int = 1,
    noise: float = 0.35,
    val_fraction: float = 0.25,
    seed: int = 0,
) -> Dataset:
    """Each class is one pattern family, randomised in phase/position and
    corrupted by Gaussian noise and a random contrast change."""
    if not 2 <= num_classes <= len(PATTERNS):
        raise DatasetError(f"classes must be in [2, {len(PATTERNS)}]")
    if size < 2 or size & (size - 1):
        raise DatasetError("size must be a power of two >= 2")
    if n < 2:
        raise DatasetError("need at least two examples")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n).astype(np.uint8)
    images = np.empty((n, size, size, channels), dtype=np.float32)
    for i, lab in enumerate(labels):
        base = _pattern(PATTERNS[lab], size, rng)
        contrast = rng.uniform(0.4, 1.0)
        for c in range(channels):
            img = 0.5 + contrast * (base - 0.5) + noise * rng.standard_normal((size, size))
            images[i, :, :, c] = np.clip(img, 0.0, 1.0)
    n_val = max(1, int(round(n * val_fraction)))
    return _split(images, labels, num_classes, n_val)


def _split(images, labels, num_classes, n_val) -> Dataset:
    n = images.shape[0]
    if not 0 < n_val < n:
        raise DatasetError("validation split must leave both splits non-empty")
    k = n - n_val
    return Dataset(images[:k], labels[:k], images[k:], labels[k:], num_classes)


def write_dataset(ds: Dataset, path) -> None:
    images = np.concatenate([ds.train_x, ds.val_x]).astype("<f4")
    labels = np.concatenate([ds.train_y, ds.val_y]).astype(np.uint8)
    h, w, c = images.shape[1:]
    header = _HEADER.pack(MAGIC, h, w, c, images.shape[0], ds.num_classes, ds.val_x.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(images.tobytes())
        fh.write(labels.tobytes())


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetError("file too short for header")
    magic, h, w, c, count, classes, n_val = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    n_img = h * w * c * count
    expected = _HEADER.size + 4 * n_img + count
    if len(blob) != expected:
        raise DatasetError(f"expected {expected} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype="<f4", count=n_img, offset=_HEADER.size)
    images = images.reshape(count, h, w, c).astype(np.float32)
    labels = np.frombuffer(blob, dtype=np.uint8, count=count, offset=_HEADER.size + 4 * n_img).copy()
    if labels.size and labels.max() >= classes:
        raise DatasetError("label out of range")
    return _split(images, labels, classes, n_val)
