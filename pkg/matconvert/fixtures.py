#!/usr/bin/env python3
"""Build small synthetic MAT bundles shaped like the radar database, for
converter tests. Run directly to write one: fixtures.py OUT.mat [--n 20]."""
from __future__ import annotations

import argparse
import sys

import numpy as np
import scipy.io


def make_bundle(n: int = 20, dim: int = 512, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "Data_train_2": rng.random((n, dim)),
        "label_train_2": rng.integers(0, 8, size=(n, 1)),
        "Data_test_2": rng.random((n, dim)),
        "label_test_2": rng.integers(0, 8, size=(n, 1)),
        "permut": rng.permutation(n).reshape(1, n),
    }


def write_fixture(path, n: int = 20, dim: int = 512, seed: int = 0) -> dict:
    bundle = make_bundle(n, dim, seed)
    scipy.io.savemat(path, bundle)
    return bundle


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a fixture MAT bundle")
    parser.add_argument("out", help="output .mat path")
    parser.add_argument("--n", type=int, default=20)
    parser.add_argument("--dim", type=int, default=512)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    write_fixture(args.out, args.n, args.dim, args.seed)
    print(f"wrote {args.out}: {args.n} rows, dim {args.dim}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
