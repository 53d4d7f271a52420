"""Build an IDX-format MNIST subset from the ``mnist`` npm package.

The package bundles 10,000 real 28x28 MNIST digits as JSON.  This script
fetches it with ``npm pack``, splits it per class into train/test with a
fixed seed and writes the four standard IDX files, so that
``blackmarks.data.load_mnist`` can read the result unchanged.

    python scripts/fetch_mnist_subset.py data/mnist
    export BLACKMARKS_MNIST_DIR=data/mnist
"""
import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from blackmarks.data import MNIST_FILES, write_idx


def fetch(workdir: Path, tarball=None) -> Path:
    if tarball is None:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, capture_output=True)
        tarball = workdir / "mnist-1.1.0.tgz"
    with tarfile.open(tarball) as tf:
        tf.extractall(workdir, filter="data")
    return workdir / "package" / "src" / "digits"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tarball", type=Path, help="use an already downloaded mnist-1.1.0.tgz")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    split = {"train": ([], []), "test": ([], [])}
    with tempfile.TemporaryDirectory() as tmp:
        digits = fetch(Path(tmp), args.tarball)
        for c in range(10):
            raw = np.asarray(json.loads((digits / f"{c}.json").read_text())["data"])
            images = np.round(raw * 255).astype(np.uint8).reshape(-1, 28, 28)
            order = rng.permutation(len(images))
            test, train = order[:args.test_per_class], order[args.test_per_class:]
            for name, idx in (("train", train), ("test", test)):
                split[name][0].append(images[np.sort(idx)])
                split[name][1].append(np.full(len(idx), c, dtype=np.uint8))

    args.out.mkdir(parents=True, exist_ok=True)
    for name, (imgs, labs) in split.items():
        imgs, labs = np.concatenate(imgs), np.concatenate(labs)
        order = rng.permutation(len(labs))
        img_file, lab_file = MNIST_FILES[name]
        write_idx(args.out / img_file, imgs[order])
        write_idx(args.out / lab_file, labs[order])
        print(f"{name}: {len(labs)} images -> {args.out}")


if __name__ == "__main__":
    main()
