"""CIFAR-10 binary batches, normalization and augmentation.

Record layout (3073 bytes): one label byte, then 1024 red, 1024 green and
1024 blue bytes, each plane a row-major 32 x 32 image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError
from .rng import Rng
from .tensor import Tensor

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

# Per-channel mean / std of the 50,000-image CIFAR-10 training split, pixels
# scaled to [0, 1]. Recompute with `channel_stats` on data_batch_1..5.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


@dataclass
class Cifar10Dataset:
    images: np.ndarray  # N x 3 x 32 x 32 uint8
    labels: np.ndarray  # N int64
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[1:] != IMAGE_SHAPE or self.images.dtype != np.uint8:
            raise FormatError(f"images must be N x 3 x 32 x 32 uint8, got "
                              f"{self.images.shape} {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise FormatError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: Optional[int]) -> "Cifar10Dataset":
        """First ``n`` records (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Cifar10Dataset(self.images[:n], self.labels[:n], self.split)


def parse_records(raw: bytes, source: str = "<bytes>") -> Cifar10Dataset:
    if len(raw) % RECORD_BYTES:
        offset = len(raw) - len(raw) % RECORD_BYTES
        raise FormatError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}; "
                          f"truncated record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise FormatError(f"{source}: label {labels[bad[0]]} >= {NUM_CLASSES} at byte offset "
                          f"{bad[0] * RECORD_BYTES}")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return Cifar10Dataset(images, labels)


def load_cifar10(paths: Sequence, split: str = "train") -> Cifar10Dataset:
    parts = []
    for p in paths:
        with open(p, "rb") as fh:
            parts.append(parse_records(fh.read(), str(p)))
    if not parts:
        return Cifar10Dataset(np.zeros((0, *IMAGE_SHAPE), np.uint8), np.zeros(0, np.int64), split)
    return Cifar10Dataset(np.concatenate([d.images for d in parts]),
                          np.concatenate([d.labels for d in parts]), split)


def write_cifar10(ds: Cifar10Dataset, path) -> None:
    rec = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1:] = ds.images.reshape(len(ds), -1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def find_cifar10(root) -> Optional[tuple]:
    """Return (train_paths, test_paths) if ``root`` holds the binary batches."""
    if not root:
        return None
    for d in (root, os.path.join(root, "cifar-10-batches-bin")):
        train = [os.path.join(d, f) for f in TRAIN_FILES]
        test = [os.path.join(d, f) for f in TEST_FILES]
        if all(os.path.isfile(p) for p in train + test):
            return train, test
    return None


def channel_stats(images: np.ndarray) -> tuple:
    """Per-channel (mean, std) of uint8 images scaled to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    return tuple(x.mean(axis=(0, 2, 3))), tuple(x.std(axis=(0, 2, 3)))


def preprocess(images: np.ndarray, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Tensor:
    """uint8 N x 3 x H x W -> float32 tensor, scaled to [0, 1] then standardized."""
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    x = images.astype(np.float32) / np.float32(255.0)
    return Tensor((x - m) / s, dtype=np.float32)


def augment(images: np.ndarray, flip: bool, pad_crop: int, rng: Rng) -> np.ndarray:
    """Random horizontal flip then zero-pad + random crop, per image.

    Draw order per image (batch order): flip draw, then crop row, then crop
    column. Disabled steps consume no draws.
    """
    if not flip and pad_crop == 0:
        return images
    out = np.empty_like(images)
    h, w = images.shape[2:]
    p = pad_crop
    for i, img in enumerate(images):
        if flip and rng.below(2):
            img = img[:, :, ::-1]
        if p:
            dy, dx = rng.below(2 * p + 1), rng.below(2 * p + 1)
            padded = np.zeros((img.shape[0], h + 2 * p, w + 2 * p), dtype=images.dtype)
            padded[:, p:p + h, p:p + w] = img
            img = padded[:, dy:dy + h, dx:dx + w]
        out[i] = img
    return out


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def batches(n: int, batch_size: int, order: Optional[Iterable] = None):
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def synthetic_cifar10(n: int, seed: int = 0, noise: float = 40.0) -> Cifar10Dataset:
    """Learnable stand-in with CIFAR-10's record format.

    Each class is a fixed colour blob at a class-specific position over
    random background noise. Useful for fixtures and smoke runs; it says
    nothing about accuracy on real CIFAR-10.
    """
    g = np.random.default_rng(seed)
    labels = g.integers(0, NUM_CLASSES, size=n)
    palette = np.random.default_rng(1234).integers(40, 216, size=(NUM_CLASSES, 3))
    yy, xx = np.mgrid[0:32, 0:32]
    imgs = g.normal(128.0, noise, size=(n, *IMAGE_SHAPE))
    for i, c in enumerate(labels):
        cy, cx = 8 + 16 * (c // 5) + g.integers(-3, 4), 4 + 6 * (c % 5) + g.integers(-2, 3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 18.0)
        imgs[i] = imgs[i] * (1 - blob) + palette[c][:, None, None] * blob
    return Cifar10Dataset(np.clip(np.rint(imgs), 0, 255).astype(np.uint8), labels.astype(np.int64))
