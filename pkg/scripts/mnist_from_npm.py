"""Rebuild MNIST IDX files from the digits bundled in the npm ``mnist`` package.

The npm package (mnist 1.1.0) ships 10,000 MNIST digits as per-class JSON
arrays of 28x28 intensities scaled to [0, 1] and rounded to 3 decimals.
Multiplying by 255 and rounding recovers the original bytes exactly.

Usage:
    python3 scripts/mnist_from_npm.py path/to/mnist-1.1.0.tgz data/mnist
"""
import gzip
import json
import struct
import sys
import tarfile
from pathlib import Path

import numpy as np


def main(tgz, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            raw = np.asarray(json.load(tar.extractfile(member))["data"], dtype=np.float64)
            pix = np.rint(raw * 255.0).astype(np.uint8).reshape(-1, 28, 28)
            images.append(pix)
            labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    n = len(labels)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.tobytes())
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
