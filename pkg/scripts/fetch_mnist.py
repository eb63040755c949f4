#!/usr/bin/env python3
"""Build gzipped MNIST IDX files for the training experiments.

Two sources are supported:

  --from-npm PATH   the `mnist` npm package (tarball or unpacked directory),
                    which ships 10,000 MNIST digits as JSON pixel arrays
                    scaled to [0, 1] with three decimals; pixels are mapped
                    back to bytes with round(v * 255)
  --from-idx DIR    official IDX files (train-images-idx3-ubyte etc.),
                    re-written gzipped under the same stems

Examples:
  npm pack mnist && python scripts/fetch_mnist.py --from-npm mnist-1.1.0.tgz
  python scripts/fetch_mnist.py --from-idx ~/Downloads/mnist --out data/mnist
  python scripts/fetch_mnist.py --subset 1000 --from-dir data/mnist --out tests/data --stem mnist1k
"""

import argparse
import gzip
import json
import sys
import tarfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rofl.dataio import idx_from_array, load_idx, serialize_idx  # noqa: E402


def read_npm(path: Path):
    images, labels = [], []
    if path.is_dir():
        def read(digit):
            return json.loads((path / "src" / "digits" / f"{digit}.json").read_text())
    else:
        tar = tarfile.open(path)

        def read(digit):
            return json.load(tar.extractfile(f"package/src/digits/{digit}.json"))
    for digit in range(10):
        flat = np.asarray(read(digit)["data"], dtype=float)
        imgs = np.rint(flat * 255.0).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(imgs)
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_pair(out: Path, stem: str, images, labels):
    out.mkdir(parents=True, exist_ok=True)
    for kind, arr in (("images-idx3-ubyte", images), ("labels-idx1-ubyte", labels)):
        target = out / f"{stem}-{kind}.gz"
        # mtime=0 keeps the archive byte-identical across runs
        with open(target, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(serialize_idx(idx_from_array(arr)))
        print(f"wrote {target} ({arr.shape[0]} items)")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-npm", type=Path)
    src.add_argument("--from-idx", type=Path)
    src.add_argument("--from-dir", type=Path, help="existing output of this script")
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--stem", default=None)
    ap.add_argument("--subset", type=int, default=0, help="keep a seeded random subset of this size")
    ap.add_argument("--seed", type=int, default=2021)
    args = ap.parse_args(argv)

    if args.from_npm:
        images, labels = read_npm(args.from_npm)
        stem = args.stem or "mnist10k"
    else:
        root = args.from_idx or args.from_dir
        found = sorted(root.glob("*-images-idx3-ubyte*"))
        if not found:
            ap.error(f"no *-images-idx3-ubyte files in {root}")
        images, labels = [], []
        for img in found:
            prefix = img.name.split("-images-idx3-ubyte")[0]
            lab = next(root.glob(f"{prefix}-labels-idx1-ubyte*"))
            images.append(load_idx(img).array())
            labels.append(load_idx(lab).array())
        images, labels = np.concatenate(images), np.concatenate(labels)
        stem = args.stem or "mnist"

    # shuffle so files are not sorted by class
    order = np.random.default_rng(args.seed).permutation(len(labels))
    if args.subset:
        order = order[: args.subset]
    write_pair(args.out, stem, images[order], labels[order])


if __name__ == "__main__":
    main()
