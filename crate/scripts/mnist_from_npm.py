#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the 10,000-digit MNIST sample shipped in the
`mnist` npm package (src/digits/{0..9}.json, values in [0, 1] rounded to three
decimals).

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Pixels are mapped back to bytes with round(v * 255), which is exact for the
three-decimal encoding. Samples are interleaved with a fixed permutation and
split 8000 train / 2000 test.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN = 8000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)
        arr = arr.reshape(-1, 784)
        images.append(arr)
        labels.append(np.full(arr.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.default_rng(20200101).permutation(len(labels))
    images, labels = images[perm], labels[perm]

    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, TRAIN)), ("t10k", slice(TRAIN, None))):
        im, lb = images[sl], labels[sl]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x00000803, (len(lb), 28, 28), im.tobytes())
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x00000801, (len(lb),), lb.tobytes())
        print(name, len(lb), np.bincount(lb, minlength=10).tolist())


if __name__ == "__main__":
    main(*sys.argv[1:3])
