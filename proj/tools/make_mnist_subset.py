#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/
"""
import json
import struct
import sys
from pathlib import Path


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    images = bytearray()
    labels = bytearray()
    for digit in range(10):
        pixels = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(pixels) % 784 == 0
        images.extend(min(255, max(0, round(v * 255))) for v in pixels)
        labels.extend([digit] * (len(pixels) // 784))
    n = len(labels)
    (dst / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x00000803, n, 28, 28) + images)
    (dst / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x00000801, n) + labels)
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main()
