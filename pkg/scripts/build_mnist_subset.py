"""Convert the 5k MNIST CSV shipped inside the mlxtend wheel into IDX files.

Usage: python scripts/build_mnist_subset.py path/to/mnist_5k.csv.gz out_dir

The CSV is sorted by class (500 rows each). The first 400 rows of every class
become the training split, the last 100 the test split; both are then shuffled
with a fixed seed so class order does not leak into the files.
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def _write_images(path, images):
    with gzip.open(path, "wb", compresslevel=9) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        fh.write(images.astype(np.uint8).tobytes())


def _write_labels(path, labels):
    with gzip.open(path, "wb", compresslevel=9) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def main(csv_path, out_dir):
    table = np.genfromtxt(csv_path, delimiter=",")
    x, y = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    train, test = [], []
    for k in range(10):
        idx = np.flatnonzero(y == k)
        train.extend(idx[:400])
        test.extend(idx[400:])
    rng = np.random.default_rng(20240501)
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_images(out / "train-images-idx3-ubyte.gz", x[train])
    _write_labels(out / "train-labels-idx1-ubyte.gz", y[train])
    _write_images(out / "t10k-images-idx3-ubyte.gz", x[test])
    _write_labels(out / "t10k-labels-idx1-ubyte.gz", y[test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
