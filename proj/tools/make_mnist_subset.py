#!/usr/bin/env python3
"""Build the 10k-digit MNIST subset used by the desk-scale recipes.

Source: the `mnist` npm package (cazala/mnist, MIT), which bundles 10,000
MNIST digits as per-class JSON arrays of 784 floats in [0, 1].

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-10k

Pixels are quantized back to bytes (round(v * 255)). Samples are interleaved
with a fixed permutation (seed 20240101) and split 8000 train / 2000 test.
Output files follow the IDX layout read by issnet::load_idx.
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path: Path, array: np.ndarray) -> None:
    dims = array.shape
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims))
    header += b"".join(struct.pack(">I", d) for d in dims)
    path.write_bytes(header + array.astype(np.uint8).tobytes(order="C"))


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 1
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)

    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        rows = np.asarray(flat, dtype=np.float64).reshape(-1, 784)
        images.append(rows)
        labels.append(np.full(rows.shape[0], digit, dtype=np.uint8))
    x = np.rint(np.concatenate(images) * 255.0).clip(0, 255).astype(np.uint8)
    y = np.concatenate(labels)
    assert x.shape[0] == 10000, x.shape

    perm = np.random.RandomState(20240101).permutation(x.shape[0])
    x, y = x[perm].reshape(-1, 28, 28), y[perm]

    write_idx(dst / "train-images-idx3-ubyte", x[:8000])
    write_idx(dst / "train-labels-idx1-ubyte", y[:8000])
    write_idx(dst / "t10k-images-idx3-ubyte", x[8000:])
    write_idx(dst / "t10k-labels-idx1-ubyte", y[8000:])
    return 0


if __name__ == "__main__":
    sys.exit(main())
