#!/usr/bin/env python3
"""Build gzipped IDX files from the digit subset bundled in the `mnist` npm package.

The full MNIST distribution is not reachable from every build environment, but
the npm package (MIT-licensed, 10k digits drawn from MNIST) is. Pixels are
stored there as intensity/255 rounded to three decimals; they are mapped back
to bytes here. The digits are shuffled with a fixed seed and split into a
training pool and a held-out test set.

Usage: prepare_mnist.py [path/to/mnist-x.y.z.tgz] [--out data/mnist]
Without a tarball argument the script runs `npm pack mnist` in a temp dir.
"""

import argparse
import gzip
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile

ROWS = COLS = 28
TRAIN_COUNT = 8000


def fetch_tarball(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    return os.path.join(workdir, "mnist-1.1.0.tgz")


def read_digits(tarball):
    examples = []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = json.load(member)["data"]
            size = ROWS * COLS
            for start in range(0, len(flat), size):
                pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[start:start + size])
                examples.append((pixels, digit))
    return examples


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("tarball", nargs="?")
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    parser.add_argument("--seed", type=int, default=20231114)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball or fetch_tarball(tmp)
        examples = read_digits(tarball)

    random.Random(args.seed).shuffle(examples)
    splits = {"train": examples[:TRAIN_COUNT], "t10k": examples[TRAIN_COUNT:]}
    os.makedirs(args.out, exist_ok=True)
    for name, rows in splits.items():
        images = b"".join(p for p, _ in rows)
        labels = bytes(l for _, l in rows)
        write_idx(os.path.join(args.out, f"{name}-images-idx3-ubyte.gz"), 0x00000803,
                  [len(rows), ROWS, COLS], images)
        write_idx(os.path.join(args.out, f"{name}-labels-idx1-ubyte.gz"), 0x00000801,
                  [len(rows)], labels)
        print(f"{name}: {len(rows)} examples")


if __name__ == "__main__":
    main()
