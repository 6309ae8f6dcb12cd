"""Convert the 10k-digit MNIST subset shipped in the `mnist` npm package to gzipped IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_subset_to_idx.py package/src/digits data/mnist10k

Pixels are stored as floats rounded to three decimals; multiplying by 255 and
rounding recovers the original bytes. Samples are shuffled with a fixed seed
and split 8000 train / 2000 test.
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN = 8000


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        assert len(flat) % (SIDE * SIDE) == 0
        for i in range(0, len(flat), SIDE * SIDE):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + SIDE * SIDE]]
            samples.append((px, digit))
    random.Random(20240601).shuffle(samples)
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
