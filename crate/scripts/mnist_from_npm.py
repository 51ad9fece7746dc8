#!/usr/bin/env python3
"""Rebuild gzip'd IDX files from the digits bundled in the `mnist` npm package.

The npm package (https://github.com/cazala/mnist) ships 10,000 MNIST digits as
JSON arrays of intensities rounded to three decimals; round(v * 255) recovers the
original bytes exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        for v in values:
            b = round(v * 255)
            assert abs(b / 255 - v) < 6e-4
            pixels.append(b)
        labels.extend([digit] * (len(values) // 784))
    count = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28) + bytes(pixels))
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count) + bytes(labels))
    print(f"wrote {count} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
