"""Writers for small synthetic dataset files."""

import gzip
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, type_code=0x08, compress=False):
    array = np.asarray(array)
    header = struct.pack(">HBB", 0, type_code, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    path = Path(path)
    if compress:
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


def write_mnist_like(directory, n_train=256, n_test=64, seed=0, compress=True):
    """Two-class-ish toy digits: class c lights up column band c."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    suffix = ".gz" if compress else ""
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, size=n)
        images = rng.integers(0, 40, size=(n, 28, 28))
        for i, c in enumerate(labels):
            images[i, 4:24, 2 + 2 * c:4 + 2 * c] = 250
        write_idx(directory / f"{prefix}-images-idx3-ubyte{suffix}", images, compress=compress)
        write_idx(directory / f"{prefix}-labels-idx1-ubyte{suffix}", labels, compress=compress)
    return directory


def write_cifar_batch(path, n, seed=0):
    rng = np.random.default_rng(seed)
    records = np.zeros((n, 3073), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 10, size=n)
    records[:, 1:] = rng.integers(0, 256, size=(n, 3072))
    Path(path).write_bytes(records.tobytes())
    return records
