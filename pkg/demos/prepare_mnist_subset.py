"""Write a small MNIST stand-in as IDX files.

The full MNIST archives are the intended input (point ``$MNIST_DIR`` at
them).  When they are not available, this script takes the 5000-image
MNIST subset bundled with mlxtend (500 images per digit), shuffles it with
a fixed seed, and writes a 4000/1000 stratified train/test split under the
standard IDX file names so every loader path stays the same.

    python demos/prepare_mnist_subset.py data/mnist-subset
    export MNIST_DIR=data/mnist-subset
"""
import argparse
from pathlib import Path

import numpy as np

from weightmask.tasks import write_idx_images, write_idx_labels


def write_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    from mlxtend.data import mnist_data  # optional dependency, only needed here

    images, labels = mnist_data()
    images = images.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng(seed)
    test = np.concatenate([rng.permutation(np.flatnonzero(labels == c))[:test_per_class] for c in range(10)])
    train = np.setdiff1d(np.arange(len(labels)), test)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", rng.permutation(train)), ("t10k", rng.permutation(test))):
        write_idx_images(out / f"{prefix}-images-idx3-ubyte", images[idx])
        write_idx_labels(out / f"{prefix}-labels-idx1-ubyte", labels[idx])
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default="data/mnist-subset")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    path = write_subset(args.out, seed=args.seed)
    print(f"wrote {path}; export MNIST_DIR={path}")
