"""Dataset loading (IDX, CIFAR-10 binary), integer normalization and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .itensor import IntTensor, as_int, intdiv

DATA_DIR_ENV = "INTLEARN_DATA_DIR"
ONE_HOT_VALUE = 32
NORM_GAIN = 51  # floor(64 * 0.8): MAD of a sigma=64 gaussian

IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4")}

CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass
class RawDataset:
    images: IntTensor  # [N, C, H, W], values in [0, 255]
    labels: np.ndarray  # [N] class indices
    class_count: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, limit: int | None) -> "RawDataset":
        if limit is None or limit >= len(self):
            return self
        return RawDataset(self.images[:limit], self.labels[:limit], self.class_count)


@dataclass(frozen=True)
class NormStats:
    mu: int
    omega: int


@dataclass
class NormalizedDataset:
    images: IntTensor
    labels: np.ndarray
    stats: NormStats
    class_count: int = 10

    def __len__(self):
        return len(self.labels)


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DatasetFormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def load_idx(path) -> IntTensor:
    """Read an IDX file (optionally gzipped) into an int64 tensor."""
    raw = _read_maybe_gzip(path)
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in IDX_DTYPES or ndim == 0:
        raise DatasetFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = np.dtype(IDX_DTYPES[type_code])
    count = 1
    for d in dims:
        count *= d
    if count * dtype.itemsize > 2**40:
        raise DatasetFormatError(f"{path}: declared size {dims} is implausibly large")
    if len(raw) - header != count * dtype.itemsize:
        raise DatasetFormatError(
            f"{path}: payload has {len(raw) - header} bytes, header declares {count * dtype.itemsize}")
    data = np.frombuffer(raw, dtype=dtype, offset=header, count=count)
    return data.astype(np.int64).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}(.gz) not found in {directory}")


def load_idx_split(directory, split: str) -> RawDataset:
    """MNIST-style split (``train`` or ``test``) as images ``[N, 1, 28, 28]``."""
    directory = Path(directory)
    prefix = {"train": "train", "test": "t10k"}[split]
    images = load_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.ndim != 3:
        raise DatasetFormatError(f"expected a 3-D image tensor, got shape {images.shape}")
    return RawDataset(images[:, None, :, :], labels, 10)


def load_cifar10_bin(paths) -> RawDataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].astype(np.int64).reshape(-1, 3, 32, 32))
    lab = np.concatenate(labels)
    if lab.size and lab.max() > 9:
        raise DatasetFormatError("CIFAR-10 label byte out of range")
    return RawDataset(np.concatenate(images), lab, 10)


def load_cifar10_split(directory, split: str) -> RawDataset:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    if split == "train":
        files = [directory / f"data_batch_{i}.bin" for i in range(1, 6)]
    else:
        files = [directory / "test_batch.bin"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
    return load_cifar10_bin(files)


def to_grayscale(images: IntTensor) -> IntTensor:
    """Integer luma (ITU-R 601 weights in thousandths) for ``[N, 3, H, W]`` images."""
    images = as_int(images)
    r, g, b = images[:, 0], images[:, 1], images[:, 2]
    return ((r * 299 + g * 587 + b * 114) // 1000)[:, None]


DATASETS = {
    "mnist": ("mnist", load_idx_split),
    "fashionmnist": ("fashionmnist", load_idx_split),
    "cifar10": ("cifar10", load_cifar10_split),
}


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def load_dataset(name: str, split: str, data_dir=None) -> RawDataset:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    subdir, loader = DATASETS[key]
    root = resolve_data_dir(data_dir)
    directory = root / subdir if (root / subdir).is_dir() else root
    return loader(directory, split)


def compute_stats(images: IntTensor) -> NormStats:
    x = as_int(images)
    count = x.size
    if count == 0:
        raise ValueError("cannot normalize an empty dataset")
    mu = intdiv(int(x.sum(dtype=np.int64)), count)
    omega = intdiv(int(np.abs(x - mu).sum(dtype=np.int64)), count)
    if omega < 1:
        raise DegenerateDataError("mean absolute deviation is zero; data is (nearly) constant")
    return NormStats(mu, omega)


def apply_stats(images: IntTensor, stats: NormStats) -> IntTensor:
    return intdiv((as_int(images) - stats.mu) * NORM_GAIN, stats.omega)


def normalize(train: RawDataset, *others: RawDataset):
    """Normalize ``train`` with its own statistics and reuse them for ``others``.

    Returns a single :class:`NormalizedDataset` when no other splits are given,
    otherwise a tuple with one entry per input.
    """
    stats = compute_stats(train.images)
    out = [NormalizedDataset(apply_stats(d.images, stats), d.labels, stats, d.class_count)
           for d in (train, *others)]
    return out[0] if not others else tuple(out)


def one_hot_32(labels, class_count: int) -> IntTensor:
    labels = np.asarray(labels)
    labels = as_int(labels if labels.size else labels.astype(np.int64)).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count})")
    out = np.zeros((labels.size, class_count), dtype=np.int64)
    out[np.arange(labels.size), labels] = ONE_HOT_VALUE
    return out


def batch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset, batch_size: int, seed: int = 0, epoch: int = 0,
               shuffle: bool = True) -> Iterator[tuple[IntTensor, IntTensor, np.ndarray]]:
    """Yield ``(images, one_hot_labels, labels)``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        labels = dataset.labels[idx]
        yield dataset.images[idx], one_hot_32(labels, dataset.class_count), labels
