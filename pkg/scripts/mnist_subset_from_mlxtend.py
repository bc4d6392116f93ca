#!/usr/bin/env python3
"""Write the 5000-digit MNIST sample bundled with mlxtend as standard IDX files.

Only useful where the official MNIST files cannot be downloaded.  The sample
is shuffled with a seeded SplitMix64 permutation and split into "train" and
"t10k" files, so the rest of the tooling can read it like the real thing.

    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/mnist_subset_from_mlxtend.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import argparse
import gzip
import zipfile
from pathlib import Path

import numpy as np

from gridgraph.data import MNIST_FILES, Rng, encode_idx_images, encode_idx_labels

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_sample(source: Path) -> tuple[np.ndarray, np.ndarray]:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            raw = gzip.decompress(zf.read(MEMBER))
    elif source.suffix == ".gz":
        raw = gzip.decompress(source.read_bytes())
    else:
        raw = source.read_bytes()
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", type=Path, help="mlxtend wheel, mnist_5k.csv.gz or the plain csv")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test", type=int, default=1000, help="images written to the t10k files")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pixels, labels = read_sample(args.source)
    perm = Rng(args.seed).permutation(len(labels))
    pixels, labels = pixels[perm], labels[perm]
    args.out.mkdir(parents=True, exist_ok=True)
    parts = {"test": slice(0, args.test), "train": slice(args.test, None)}
    for split, sl in parts.items():
        img_name, lab_name = MNIST_FILES[split]
        (args.out / img_name).write_bytes(encode_idx_images(pixels[sl]))
        (args.out / lab_name).write_bytes(encode_idx_labels(labels[sl]))
        print(f"{split}: {len(labels[sl])} images -> {args.out}")


if __name__ == "__main__":
    main()
