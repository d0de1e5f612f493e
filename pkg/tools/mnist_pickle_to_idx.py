"""Rebuild the MNIST IDX files from the ``mnist.pkl.gz`` archive.

The archive (shipped e.g. inside the ``mnist-hub`` wheel on PyPI) stores pixels
as float32 values ``k / 256``.  The byte ``k`` is recovered from the IEEE-754
bit pattern with integer shifts only, so the output is bit-exact.

Usage::

    pip download --no-deps -d /tmp/mh mnist-hub
    python tools/mnist_pickle_to_idx.py /tmp/mh/mnist_hub-*.whl data/mnist

The 50000 train + 10000 validation images are concatenated back into the
original 60000-image training split.
"""

import argparse
import gzip
import io
import pickle
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def float32_over_256_to_bytes(x):
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.int64)
    exponent = (bits >> 23) & 0xFF
    mantissa = (bits & 0x7FFFFF) | 0x800000
    shift = 142 - exponent
    out = np.where(bits == 0, 0, mantissa >> np.clip(shift, 0, 63))
    if (shift < 0).any() or (out > 255).any():
        raise ValueError("pixel values are not of the form k/256")
    return out.astype(np.uint8)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def load_archive(source):
    source = Path(source)
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            name = next(n for n in zf.namelist() if n.endswith("mnist.pkl.gz"))
            raw = zf.read(name)
    else:
        raw = source.read_bytes()
    with gzip.open(io.BytesIO(raw)) as fh:
        return pickle.load(fh, encoding="latin1")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="mnist.pkl.gz or a wheel containing it")
    parser.add_argument("out_dir")
    args = parser.parse_args(argv)

    (x_tr, y_tr), (x_va, y_va), (x_te, y_te) = load_archive(args.source)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_x = np.concatenate([float32_over_256_to_bytes(x_tr), float32_over_256_to_bytes(x_va)])
    train_y = np.concatenate([y_tr, y_va]).astype(np.uint8)
    test_x = float32_over_256_to_bytes(x_te)
    test_y = np.asarray(y_te).astype(np.uint8)

    write_idx(out / "train-images-idx3-ubyte.gz", train_x.reshape(-1, 28, 28))
    write_idx(out / "train-labels-idx1-ubyte.gz", train_y)
    write_idx(out / "t10k-images-idx3-ubyte.gz", test_x.reshape(-1, 28, 28))
    write_idx(out / "t10k-labels-idx1-ubyte.gz", test_y)
    print(f"wrote {len(train_y)} train / {len(test_y)} test samples to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
