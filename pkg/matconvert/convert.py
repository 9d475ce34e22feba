#!/usr/bin/env python3
"""Convert the MAT-container radar database to FLDS dataset files.

The source container holds five arrays: training and test feature blocks
(n x 512 spectra), their label columns (integers 0..7), and a stored row
permutation. Output is the little-endian FLDS container consumed by the
simulator: magic "FLDS", version u16, count u32, feature dim u32, class
count u16, f32 features row-major, u16 labels.

Usage: convert.py IN.mat OUT_train.flds OUT_test.flds [--permut]
"""
from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import dataclass

import numpy as np
import scipy.io

NUM_CLASSES = 8
REQUIRED = ("Data_train_2", "label_train_2", "Data_test_2", "label_test_2",
            "permut")


class BundleError(ValueError):
    """Raised when the MAT container is missing arrays or malformed."""


@dataclass
class MatBundle:
    """The five arrays of the radar database container."""

    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    permut: np.ndarray

    def validate(self) -> None:
        if self.train.ndim != 2 or self.test.ndim != 2:
            raise BundleError("feature blocks must be 2-D")
        if self.train.shape[1] != self.test.shape[1]:
            raise BundleError(
                f"train width {self.train.shape[1]} != test width "
                f"{self.test.shape[1]}")
        for name, feats, labels in (("train", self.train, self.train_labels),
                                    ("test", self.test, self.test_labels)):
            if labels.shape[0] != feats.shape[0]:
                raise BundleError(
                    f"{name} has {feats.shape[0]} rows but "
                    f"{labels.shape[0]} labels")
            if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
                raise BundleError(
                    f"{name} labels outside 0..{NUM_CLASSES - 1}")
        n = self.train.shape[0]
        if self.permut.shape[0] != n:
            raise BundleError(
                f"permutation length {self.permut.shape[0]} != row count {n}")
        if not np.array_equal(np.sort(self.permut), np.arange(n)):
            raise BundleError("permut is not a permutation of the row indices")


def load_bundle(path) -> MatBundle:
    raw = scipy.io.loadmat(path)
    missing = [name for name in REQUIRED if name not in raw]
    if missing:
        raise BundleError(f"missing arrays: {', '.join(missing)}")
    bundle = MatBundle(
        train=np.asarray(raw["Data_train_2"], dtype=np.float64),
        train_labels=np.asarray(raw["label_train_2"]).reshape(-1).astype(np.int64),
        test=np.asarray(raw["Data_test_2"], dtype=np.float64),
        test_labels=np.asarray(raw["label_test_2"]).reshape(-1).astype(np.int64),
        permut=np.asarray(raw["permut"]).reshape(-1).astype(np.int64),
    )
    bundle.validate()
    return bundle


def write_flds(path, features: np.ndarray, labels: np.ndarray) -> None:
    count, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(b"FLDS")
        fh.write(struct.pack("<HIIH", 1, count, dim, NUM_CLASSES))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def convert(mat_path, out_train, out_test, apply_permut: bool = False) -> MatBundle:
    bundle = load_bundle(mat_path)
    train, train_labels = bundle.train, bundle.train_labels
    if apply_permut:
        train = train[bundle.permut]
        train_labels = train_labels[bundle.permut]
    write_flds(out_train, train, train_labels)
    write_flds(out_test, bundle.test, bundle.test_labels)
    return bundle


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Convert the MAT radar database to FLDS files")
    parser.add_argument("mat_path", help="input .mat container")
    parser.add_argument("out_train", help="output training .flds file")
    parser.add_argument("out_test", help="output test .flds file")
    parser.add_argument("--permut", action="store_true",
                        help="apply the stored row permutation to training data")
    args = parser.parse_args(argv)
    try:
        bundle = convert(args.mat_path, args.out_train, args.out_test,
                         args.permut)
    except (OSError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out_train} ({bundle.train.shape[0]} examples) and "
          f"{args.out_test} ({bundle.test.shape[0]} examples), dim "
          f"{bundle.train.shape[1]}, {NUM_CLASSES} classes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
