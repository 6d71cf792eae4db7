#!/usr/bin/env python3
"""Build Fashion-MNIST IDX archives from the `fashion-mnist` npm package.

The package ships one JSON file per class (src/clothes/<label>.json) with
7000 flattened 28x28 images each. The first 6000 of every class go to the
training archive and the last 1000 to the test archive, interleaved by class
so neither file is sorted by label. Rows that are not 784 pixels long are
dropped.

usage: fashion_mnist_from_npm.py <package_dir> <out_dir>
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 6000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def interleave(per_class):
    out = []
    longest = max(len(v) for v in per_class.values())
    for i in range(longest):
        for label in sorted(per_class):
            if i < len(per_class[label]):
                out.append((per_class[label][i], label))
    return out


def main(pkg, out):
    src = Path(pkg) / "src" / "clothes"
    train, test = {}, {}
    for label in range(10):
        rows = json.loads((src / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 784]
        train[label] = rows[:TRAIN_PER_CLASS]
        test[label] = rows[TRAIN_PER_CLASS:]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        pairs = interleave(split)
        write_images(out / f"{name}-images-idx3-ubyte", [p for p, _ in pairs])
        write_labels(out / f"{name}-labels-idx1-ubyte", [l for _, l in pairs])
        print(f"{name}: {len(pairs)} images")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
