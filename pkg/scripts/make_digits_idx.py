#!/usr/bin/env python3
"""Write the MNIST-format digits stand-in as IDX files.

The result can be fed to the harness with ``source = idx``, or swapped for
real MNIST files with the same names.
"""

import argparse
from pathlib import Path

from advtrans.data import digits_mnist_like, write_idx


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", type=Path)
    p.add_argument("--train", type=int, default=10_000)
    p.add_argument("--test", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gzip", action="store_true")
    args = p.parse_args()
    train, test = digits_mnist_like(args.train, args.test, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if args.gzip else ""
    write_idx(train, args.out / f"train-images-idx3-ubyte{suffix}", args.out / f"train-labels-idx1-ubyte{suffix}",
              compress=args.gzip)
    write_idx(test, args.out / f"t10k-images-idx3-ubyte{suffix}", args.out / f"t10k-labels-idx1-ubyte{suffix}",
              compress=args.gzip)
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()
