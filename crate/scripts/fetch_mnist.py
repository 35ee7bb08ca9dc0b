#!/usr/bin/env python3
"""Build the MNIST subset used by the experiments.

Pulls the 10,000 MNIST digits bundled in the `mnist` npm package and writes
them as gzipped IDX files (8,000 train / 2,000 test, fixed shuffle) into
data/mnist/. Uses only the standard library plus `npm pack`.
"""
import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

SIDE = 28


def write_idx_images(path, images):
    with gzip.open(path, "wb", compresslevel=9) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.open(path, "wb", compresslevel=9) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "mnist"))
    parser.add_argument("--train", type=int, default=8000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
        tgz = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package" / "src" / "digits" / f"{digit}.json").read_text())["data"]
            count = len(raw) // (SIDE * SIDE)
            for k in range(count):
                px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
                samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))

    random.Random(args.seed).shuffle(samples)
    train, test = samples[: args.train], samples[args.train:]
    write_idx_images(out / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
