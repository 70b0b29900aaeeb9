"""Dataset loading, splitting and augmentation.

Supported on-disk formats:

* IDX (MNIST, Fashion-MNIST): two zero bytes, a type byte (only 0x08,
  unsigned byte, is accepted), a dimension-count byte, one big-endian u32
  per dimension, then the raw payload. Gzipped files are read transparently.
* CIFAR-10 binary: 3073-byte records, one label byte followed by 3072
  channel-major pixel bytes (1024 red, 1024 green, 1024 blue).

Pixels are scaled to [0, 1] on load.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, FormatError
from .tensor import DTYPE, Rng

DATA_ROOT_ENV = "BNNLAB_DATA"
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, name: str = "idx") -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{name}: {len(raw)} bytes is too short for an IDX header")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{name}: bad magic {raw[:2].hex()} (expected 0000)")
    if raw[2] != 0x08:
        raise FormatError(f"{name}: unsupported IDX element type 0x{raw[2]:02x} (only 0x08 unsigned byte)")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"{name}: payload has {actual} bytes, expected {expected} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    images = parse_idx(_read_bytes(images_path), str(images_path))
    labels = parse_idx(_read_bytes(labels_path), str(labels_path))
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be 1-D, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 image dimensions, got {images.ndim}")
    return Dataset(images.astype(DTYPE) / DTYPE(255), labels.astype(np.int64), num_classes, split)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def load_cifar10_bin(paths: Sequence, split: str = "train") -> Dataset:
    chunks = []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / DTYPE(255)
    return Dataset(images, labels, 10, split)


# ---------------------------------------------------------------------------
# Named datasets
# ---------------------------------------------------------------------------

DATASETS = ("mnist", "fashion-mnist", "cifar10", "blobs")


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV, "data"))


def _find(directory: Path, stem: str) -> Path:
    # both the "train-images-idx3-ubyte" and "train-images.idx3-ubyte" spellings are in circulation
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = directory / f"{name}{suffix}"
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_dataset(name: str, root=None, **kw) -> tuple[Dataset, Dataset]:
    """Return ``(train, test)`` for a named dataset under the data root."""
    base = data_root(root)
    if name in ("mnist", "fashion-mnist"):
        d = base / name
        train = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"), split="train")
        test = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"), split="test")
        return train, test
    if name == "cifar10":
        d = base / "cifar10"
        if not d.exists():
            d = base / "cifar-10-batches-bin"
        train = load_cifar10_bin([d / f"data_batch_{i}.bin" for i in range(1, 6)], "train")
        test = load_cifar10_bin([d / "test_batch.bin"], "test")
        return train, test
    if name == "blobs":
        return make_blobs(rng=Rng(kw.get("seed", 0)), **{k: v for k, v in kw.items() if k != "seed"})
    raise ConfigError(f"unknown dataset {name!r}; choose from {DATASETS}")


def make_blobs(n_train: int = 1024, n_test: int = 512, num_classes: int = 2, shape=(1, 4, 4),
               spread: float = 0.15, rng: Rng | None = None) -> tuple[Dataset, Dataset]:
    """Gaussian class clusters in [0, 1], shaped as small images."""
    rng = rng or Rng(0)
    dim = int(np.prod(shape))
    centers = rng.random((num_classes, dim))

    def draw(n, split):
        labels = rng.integers(0, num_classes, size=n)
        x = centers[labels] + spread * rng.gen.standard_normal((n, dim))
        return Dataset(np.clip(x, 0, 1).astype(DTYPE).reshape((n,) + tuple(shape)), labels.astype(np.int64),
                       num_classes, split)

    return draw(n_train, "train"), draw(n_test, "test")


# ---------------------------------------------------------------------------
# Splitting, normalization, batching
# ---------------------------------------------------------------------------


def split_train_val(ds: Dataset, fraction: float = 0.9, rng: Rng | None = None) -> tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    perm = (rng or Rng(0)).permutation(len(ds))
    cut = int(round(fraction * len(ds)))
    return ds.subset(perm[:cut], "train"), ds.subset(perm[cut:], "val")


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray  # per channel
    std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        x = ds.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = np.maximum(x.std(axis=(0, 2, 3)), 1e-6)
        return cls(mean.astype(DTYPE), std.astype(DTYPE))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(DTYPE)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def iterate_batches(n: int, batch_size: int, rng: Rng | None = None) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``, shuffled when ``rng`` is given; the last may be short."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


class SealedTest:
    """Holds the test split; it can be opened exactly once, for final evaluation."""

    def __init__(self, ds: Dataset):
        self._ds = ds
        self.reads = 0

    def __len__(self):
        return len(self._ds)

    def open(self) -> Dataset:
        if self.reads:
            raise RuntimeError("the test split has already been evaluated")
        self.reads += 1
        return self._ds


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    crop_padding: int = 4

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.max_rotation_deg < 0 or self.crop_padding < 0:
            raise ConfigError("rotation and crop padding must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.hflip_prob == 0 and self.max_rotation_deg == 0 and self.crop_padding == 0

    @classmethod
    def for_dataset(cls, name: str) -> "AugmentConfig":
        # mirrored digits are not digits
        if name in ("mnist", "fashion-mnist"):
            return cls(hflip_prob=0.0)
        if name == "blobs":
            return cls(0.0, 0.0, 0)
        return cls()

    def to_dict(self) -> dict:
        return {"hflip_prob": self.hflip_prob, "max_rotation_deg": self.max_rotation_deg,
                "crop_padding": self.crop_padding}


NO_AUGMENT = AugmentConfig(0.0, 0.0, 0)


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def rotate_and_shift(images: np.ndarray, degrees: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Rotate each ``[c, h, w]`` image about its centre, then translate it.

    Output pixel ``(y, x)`` of image ``i`` is the rotated image at
    ``(y + shifts[i, 0], x + shifts[i, 1])``. Rotation is bilinear; samples
    that fall outside the source grid are zero (the ``mode="constant"``
    behaviour of ``scipy.ndimage.rotate``). An integer shift is a padded
    random crop.
    """
    images = np.ascontiguousarray(images, dtype=DTYPE)
    out = np.empty_like(images)
    _rotate_shift_kernel(images, np.deg2rad(np.asarray(degrees, np.float64)),
                         np.asarray(shifts, np.float64).reshape(-1, 2), out)
    return out


@njit(cache=True, nogil=True)
def _rotate_shift_kernel(images, theta, shifts, out):
    n, c, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    for i in range(n):
        cos, sin = np.cos(theta[i]), np.sin(theta[i])
        for y in range(h):
            for x in range(w):
                ys, xs = y + shifts[i, 0], x + shifts[i, 1]
                sy = cos * (ys - cy) + sin * (xs - cx) + cy
                sx = -sin * (ys - cy) + cos * (xs - cx) + cx
                if not (0 <= ys <= h - 1 and 0 <= xs <= w - 1 and 0 <= sy <= h - 1 and 0 <= sx <= w - 1):
                    for ch in range(c):
                        out[i, ch, y, x] = 0.0
                    continue
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                for ch in range(c):
                    v = ((1 - fy) * ((1 - fx) * images[i, ch, y0, x0] + fx * images[i, ch, y0, x1])
                         + fy * ((1 - fx) * images[i, ch, y1, x0] + fx * images[i, ch, y1, x1]))
                    out[i, ch, y, x] = min(max(v, 0.0), 1.0)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate one ``[c, h, w]`` image about its centre, bilinear, zero fill."""
    return rotate_and_shift(image[None], np.array([degrees]), np.zeros((1, 2)))[0]


def augment(images: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Random flip, rotation and padded crop, drawn independently per image."""
    if cfg.is_identity:
        return images.copy()
    n = len(images)
    flips = rng.random(n) < cfg.hflip_prob
    angles = rng.gen.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, n) if cfg.max_rotation_deg else np.zeros(n)
    shifts = rng.integers(0, 2 * cfg.crop_padding + 1, size=(n, 2)) - cfg.crop_padding
    out = images.copy()
    out[flips] = out[flips][..., ::-1]
    if not np.any(angles) and not np.any(shifts):
        return out
    return rotate_and_shift(out, angles, shifts)
