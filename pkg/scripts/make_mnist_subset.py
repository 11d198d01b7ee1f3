"""Build the desk-scale MNIST subset (2000 train / 500 test) as gzipped IDX files.

The source is the 5000-image MNIST sample bundled in the ``mlxtend`` wheel
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label).
Pass the csv.gz path, or the wheel itself; fetch it with
``pip download mlxtend --no-deps``.
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from apcsim.datasets import write_idx
from apcsim.rng import SplitMix64

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_source(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if path.suffix == ".whl":
        blob = zipfile.ZipFile(path).read(MEMBER)
    else:
        blob = path.read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(blob)), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("source", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data/mnist_subset"))
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()

    images, labels = load_source(args.source)
    rng = SplitMix64(args.seed)
    train, test = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        idx = idx[rng.permutation(len(idx))]
        train.extend(idx[:args.train_per_class])
        test.extend(idx[args.train_per_class:args.train_per_class + args.test_per_class])
    train = np.array(train)[rng.permutation(len(train))]
    test = np.array(test)[rng.permutation(len(test))]
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", images[train])
    write_idx(args.out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", images[test])
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()
