"""Datasets: IDX ingestion, synthetic generators and seeded batch iteration."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ArgumentError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_PREFIX = b"\x1f\x8b"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ArgumentError("image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ArgumentError("label outside [0, class_count)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ArgumentError("pixel values outside [0, 1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]),
                       max(self.class_count, other.class_count))

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_PREFIX:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(raw: bytes, path, magic: int, ndim: int) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at offset {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes at offset {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801).

    Either file may be gzip-compressed.  Pixels are scaled by 1/255.
    """
    images = _parse_idx(_read_bytes(images_path), images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{labels_path}: count mismatch, {labels.shape[0]} labels "
                          f"for {images.shape[0]} images in {images_path}")
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = max(10, int(labels.max()) + 1) if labels.size else 10
    if labels.size and labels.max() >= class_count:
        raise FormatError(f"{labels_path}: label {labels.max()} exceeds class count {class_count}")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels, class_count)


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool = False) -> None:
    """Write a single-channel dataset as IDX files (pixels rounded to bytes)."""
    if dataset.images.shape[1] != 1:
        raise ArgumentError("IDX images are single-channel")
    n, _, h, w = dataset.images.shape
    pix = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pix.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        Path(path).write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def generate_synthetic(kind: str, n: int, classes: int, image_side: int, seed: int,
                       noise: float = 0.1) -> Dataset:
    """Class-conditional single-channel patterns with seeded noise.

    ``gaussian-blobs`` places a bright blob at a class-specific position;
    ``ring`` draws a ring whose radius depends on the class.
    """
    if n < classes or classes < 2 or image_side < 2:
        raise ArgumentError("need n >= classes >= 2 and image_side >= 2")
    rng = _rng(seed, 0)
    labels = _balanced_labels(n, classes, rng)
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float64) / max(image_side - 1, 1)
    if kind == "gaussian-blobs":
        angles = 2 * np.pi * np.arange(classes) / classes
        cy = 0.5 + 0.3 * np.sin(angles)
        cx = 0.5 + 0.3 * np.cos(angles)
        protos = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / 0.02)
    elif kind == "ring":
        radii = 0.1 + 0.35 * (np.arange(classes) + 0.5) / classes
        r = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
        protos = np.exp(-((r[None] - radii[:, None, None]) ** 2) / 0.004)
    else:
        raise ArgumentError(f"unknown synthetic kind {kind!r}")
    x = protos[labels] + noise * rng.standard_normal((n, image_side, image_side))
    x = np.clip(x, 0.0, 1.0)[:, None]
    return Dataset(x, labels.astype(np.int64), classes)


def batch_iter(dataset: Dataset, batch_size: int, epoch_seed: int | None
               ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, images, labels)`` over a seeded permutation.

    ``epoch_seed=None`` keeps the natural order.  The final short batch is kept.
    """
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if epoch_seed is None else permutation(n, epoch_seed)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, dataset.images[idx], dataset.labels[idx]


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle driven by a Philox stream."""
    rng = _rng(seed, 1)
    order = np.arange(n)
    draws = rng.random(n)
    for i in range(n - 1, 0, -1):
        j = int(draws[i] * (i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def digits_mnist_like(n_train: int, n_test: int, seed: int = 0, side: int = 28) -> tuple[Dataset, Dataset]:
    """MNIST-format stand-in built from scikit-learn's 8x8 handwritten digits.

    Each source digit is upsampled to ``side`` x ``side`` and randomly shifted,
    rotated, scaled and thickened.  Train and test draw from disjoint source
    writers' images, so test accuracy measures generalisation.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    src = load_digits()
    base = src.images / 16.0
    labels = src.target.astype(np.int64)
    rng = _rng(seed, 2)
    order = rng.permutation(len(base))
    cut = int(0.8 * len(base))
    pools = (order[:cut], order[cut:])

    def render(pool, count, key):
        r = _rng(seed, 3, key)
        pick = pool[r.integers(0, len(pool), size=count)]
        out = np.empty((count, side, side))
        inner = 20
        for k, p in enumerate(pick):
            img = ndimage.zoom(base[p], inner / 8.0, order=1)
            img = ndimage.rotate(img, r.uniform(-12, 12), reshape=False, order=1)
            scale = r.uniform(0.9, 1.1)
            img = ndimage.zoom(img, scale, order=1)
            if r.random() < 0.5:
                img = ndimage.grey_dilation(img, size=(2, 2))
            canvas = np.zeros((side, side))
            h = min(img.shape[0], side)
            top = (side - h) // 2 + r.integers(-2, 3)
            left = (side - h) // 2 + r.integers(-2, 3)
            top = int(np.clip(top, 0, side - h))
            left = int(np.clip(left, 0, side - h))
            canvas[top:top + h, left:left + h] = img[:h, :h]
            out[k] = canvas
        out = np.clip(out, 0.0, 1.0)
        out = np.rint(out * 255.0) / 255.0
        return Dataset(out[:, None], labels[pick], 10)

    return render(pools[0], n_train, 0), render(pools[1], n_test, 1)
