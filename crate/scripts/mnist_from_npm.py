#!/usr/bin/env python3
"""Rebuild IDX files from the digit subset bundled in the `mnist` npm package.

The package ships ~10k MNIST digits as per-class JSON arrays of pixel values
rounded to three decimals. Every value is k/255 for an integer k, so the raw
bytes are recovered exactly with round(v * 255).

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TEST_COUNT = 1000
SEED = 20240601


def write_images(path, images):
    header = struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header)
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    header = struct.pack(">II", 0x00000801, len(labels))
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header)
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // (SIDE * SIDE)
        for i in range(n):
            chunk = data[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            pixels = [int(round(v * 255)) for v in chunk]
            assert all(0 <= p <= 255 for p in pixels)
            samples.append((pixels, digit))
    random.Random(SEED).shuffle(samples)
    test, train = samples[:TEST_COUNT], samples[TEST_COUNT:]
    for prefix, part in (("train", train), ("t10k", test)):
        write_images(out / f"{prefix}-images-idx3-ubyte.gz", [s[0] for s in part])
        write_labels(out / f"{prefix}-labels-idx1-ubyte.gz", [s[1] for s in part])
        print(f"{prefix}: {len(part)} images")


if __name__ == "__main__":
    main()
