"""Write the bundled MNIST subset as IDX files.

Source: mnist_5k.csv.gz shipped with the mlxtend package (500 digits per class,
784 pixel columns followed by the label). Split per class into 400 train /
100 test, then shuffled with a fixed seed.

    python tools/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist-subset
"""
import argparse
import gzip
import struct
from pathlib import Path

import numpy as np


def write_idx(images: np.ndarray, labels: np.ndarray, out: Path, prefix: str) -> None:
    n, rows, cols = images.shape
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("source")
    ap.add_argument("out")
    ap.add_argument("--train-per-class", type=int, default=400)
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()

    with gzip.open(args.source, "rt") as f:
        raw = np.loadtxt(f, delimiter=",", dtype=np.float64)
    pixels = raw[:, :-1].reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.int64)
    rng = np.random.default_rng(args.seed)

    train_idx, test_idx = [], []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        train_idx.extend(members[: args.train_per_class])
        test_idx.extend(members[args.train_per_class :])
    train_idx = np.array(train_idx)
    test_idx = np.array(test_idx)
    rng.shuffle(train_idx)
    rng.shuffle(test_idx)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(pixels[train_idx], labels[train_idx], out, "train")
    write_idx(pixels[test_idx], labels[test_idx], out, "t10k")
    print(f"train {len(train_idx)}, test {len(test_idx)} -> {out}")


if __name__ == "__main__":
    main()
