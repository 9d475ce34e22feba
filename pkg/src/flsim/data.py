"""Datasets, synthetic generators and device-shard partitioning.

A :class:`Dataset` is an in-memory pool of labelled feature vectors.
Shards are disjoint per-device subsets of a dataset, produced by either a
uniform (IID) split or class-restricted unbalanced (non-IID) splits.
Native on-disk format is the little-endian "FLDS" container; the
conventional big-endian IDX image/label pair is also readable.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Raised for malformed dataset files; carries the failing byte offset."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Labelled example pool: features (n, dim) float64, labels (n,) int."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise ValueError("feature/label count mismatch")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label out of range for declared class count")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Shard:
    """One device's local example set: an index view into a parent dataset."""

    owner: int
    dataset: Dataset
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        if len(self.indices) < 1:
            raise ValueError(f"shard for node {self.owner} is empty")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


def whole_shard(dataset: Dataset, owner: int = 0) -> Shard:
    """The full dataset viewed as one shard (centralized training)."""
    return Shard(owner, dataset, np.arange(len(dataset)))


@dataclass
class PartitionSpec:
    """How to split a dataset across K devices.

    scheme "iid": every node gets len(dataset)//K examples drawn uniformly.
    scheme "noniid": node k draws only from its class subset; subsets come
    from `class_subsets` or are drawn per node (subset size uniform over
    `classes_per_node`, default 2..C). Sizes come from `sizes`, `fractions`
    of the pool, or default to an even split.
    """

    scheme: str = "iid"
    sizes: list[int] | None = None
    fractions: list[float] | None = None
    class_subsets: list[list[int]] | None = None
    classes_per_node: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "noniid"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.fractions is not None and sum(self.fractions) > 1.0 + 1e-9:
            raise ValueError("fractions must sum to at most 1")
        if self.class_subsets is not None:
            for k, subset in enumerate(self.class_subsets):
                if not subset:
                    raise ValueError(f"empty class subset for node {k}")


def parse_partition(text: str, seed: int = 0, K: int | None = None) -> PartitionSpec:
    """Parse config strings like "iid", "noniid" or
    "noniid:classes=2-4,per_node=25".

    Restricted-class draws cannot in general consume the whole pool, so
    non-IID splits usually need per_node well below len(dataset)/K.
    """
    text = text.strip()
    if text == "iid":
        return PartitionSpec("iid", seed=seed)
    if text == "noniid":
        return PartitionSpec("noniid", seed=seed)
    if text.startswith("noniid:"):
        spec = PartitionSpec("noniid", seed=seed)
        for part in text[len("noniid:"):].split(","):
            key, _, value = part.partition("=")
            if key == "classes":
                if "-" in value:
                    lo, hi = value.split("-")
                    spec.classes_per_node = (int(lo), int(hi))
                else:
                    spec.classes_per_node = (int(value), int(value))
            elif key == "per_node":
                if K is None:
                    raise ValueError("per_node needs a known node count")
                spec.sizes = [int(value)] * K
            else:
                raise ValueError(f"unknown partition option {key!r}")
        return spec
    raise ValueError(f"cannot parse partition spec {text!r}")


def partition(dataset: Dataset, K: int, spec: PartitionSpec) -> list[Shard]:
    """Split a dataset into K disjoint shards according to the spec."""
    n = len(dataset)
    if K < 1:
        raise ValueError("need at least one node")
    rng = np.random.default_rng([int(spec.seed), 202])

    if spec.sizes is not None:
        sizes = list(spec.sizes)
    elif spec.fractions is not None:
        sizes = [int(round(f * n)) for f in spec.fractions]
    else:
        sizes = [n // K] * K
    if len(sizes) != K:
        raise ValueError(f"got {len(sizes)} sizes for {K} nodes")
    if sum(sizes) > n:
        raise ValueError("requested sizes exceed the dataset")

    if spec.scheme == "iid":
        perm = rng.permutation(n)
        shards, start = [], 0
        for k, size in enumerate(sizes):
            shards.append(Shard(k, dataset, perm[start:start + size]))
            start += size
        return shards

    # non-IID: class-restricted draws without replacement
    C = dataset.num_classes
    subsets = spec.class_subsets
    if subsets is None:
        lo, hi = spec.classes_per_node or (2, C)
        lo = max(1, min(lo, C))
        hi = max(lo, min(hi, C))
        for _ in range(100):
            subsets = [sorted(rng.choice(C, size=rng.integers(lo, hi + 1),
                                         replace=False).tolist())
                       for _ in range(K)]
            if set().union(*subsets) == set(range(C)):
                break
        else:
            raise ValueError("could not draw class subsets covering every class")
    else:
        covered = set().union(*subsets)
        if covered != set(range(C)):
            missing = sorted(set(range(C)) - covered)
            raise ValueError(f"class subsets leave classes {missing} uncovered")

    pools = {c: list(rng.permutation(np.flatnonzero(dataset.labels == c)))
             for c in range(C)}
    shards = []
    for k, (size, subset) in enumerate(zip(sizes, subsets)):
        available = [i for c in subset for i in pools[c]]
        if len(available) < size:
            raise ValueError(
                f"node {k}: classes {subset} hold only {len(available)} "
                f"remaining examples, {size} requested")
        chosen = rng.choice(len(available), size=size, replace=False)
        picked = [available[i] for i in sorted(chosen)]
        picked_set = set(picked)
        for c in subset:
            pools[c] = [i for i in pools[c] if i not in picked_set]
        shards.append(Shard(k, dataset, np.array(picked)))
    return shards


def minibatches(shard: Shard, B: int, seed: int, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle of the shard into ceil(E_k/B) batches.

    The order is fully determined by (seed, epoch, owner), so repeated calls
    and concurrent callers see identical batches.
    """
    if B < 1:
        raise ValueError("batch size must be at least 1")
    if B > shard.size:
        raise ValueError(f"batch size {B} exceeds shard size {shard.size}")
    rng = np.random.default_rng([int(seed), int(epoch), int(shard.owner)])
    perm = shard.indices[rng.permutation(shard.size)]
    n_batches = math.ceil(shard.size / B)
    out = []
    for b in range(n_batches):
        idx = perm[b * B:(b + 1) * B]
        out.append((shard.dataset.features[idx], shard.dataset.labels[idx]))
    return out


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def _balanced_labels(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    counts = [n // C + (1 if c < n % C else 0) for c in range(C)]
    labels = np.repeat(np.arange(C), counts)
    return labels[rng.permutation(n)]


def synth_radar(seed: int, n: int, C: int = 8, dim: int = 512,
                noise: float = 0.6) -> Dataset:
    """Synthetic range-spectrum-like vectors.

    Class c examples carry a dominant spectral bump centered inside the
    c-th of C contiguous bin bands, with randomized amplitude, width and
    position (bumps near a band edge spill into the neighbor band), over
    an additive noise floor. Labels are balanced to within one example per
    class. noise=0 gives a linearly separable set.
    """
    if n < C:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng([int(seed), 11])
    labels = _balanced_labels(n, C, rng)
    band = dim // C
    grid = np.arange(dim)
    feats = np.empty((n, dim))
    for h in range(n):
        c = labels[h]
        center = (c + rng.random()) * band
        width = band * (0.125 + 0.275 * rng.random())
        amplitude = 0.6 + 0.8 * rng.random()
        bump = amplitude * np.exp(-0.5 * ((grid - center) / width) ** 2)
        floor = noise * np.abs(rng.normal(size=dim))
        feats[h] = bump + floor
    return Dataset(feats, labels, C)


def synth_digits(seed: int, n: int, C: int = 10, dim: int = 784,
                 proto_scale: float = 0.25, noise: float = 1.0,
                 proto_seed: int = 0) -> Dataset:
    """Digit-like synthetic data: Gaussian class prototypes plus noise.

    Prototypes are keyed by proto_seed only, so train and validation sets
    generated with different example seeds share one class structure.
    Deliberately noisy, so small shards overfit while pooled training
    keeps improving, mirroring real image workloads.
    """
    if n < C:
        raise ValueError("need at least one example per class")
    proto_rng = np.random.default_rng([int(proto_seed), 10])
    prototypes = proto_scale * proto_rng.normal(size=(C, dim))
    rng = np.random.default_rng([int(seed), 12])
    labels = _balanced_labels(n, C, rng)
    feats = prototypes[labels] + noise * rng.normal(size=(n, dim))
    return Dataset(feats, labels, C)


# ---------------------------------------------------------------------------
# Native FLDS container (little-endian)
# ---------------------------------------------------------------------------

_FLDS_MAGIC = b"FLDS"
_FLDS_VERSION = 1


def save_native(dataset: Dataset, path) -> None:
    """Write the FLDS container: magic, version u16, count u32, dim u32,
    classes u16, f32 features row-major, u16 labels."""
    with open(path, "wb") as fh:
        fh.write(_FLDS_MAGIC)
        fh.write(struct.pack("<HIIH", _FLDS_VERSION, len(dataset),
                             dataset.feature_dim, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())


def load_native(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _FLDS_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_FLDS_MAGIC!r}", 0)
    if len(blob) < 16:
        raise FormatError("truncated header", len(blob))
    version, count, dim, classes = struct.unpack_from("<HIIH", blob, 4)
    if version != _FLDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if count == 0:
        raise FormatError("dataset holds no examples", 6)
    off = 16
    feat_bytes = count * dim * 4
    if len(blob) < off + feat_bytes:
        raise FormatError("truncated feature block", len(blob))
    feats = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    off += feat_bytes
    if len(blob) < off + count * 2:
        raise FormatError("truncated label block", len(blob))
    labels = np.frombuffer(blob, dtype="<u2", count=count, offset=off)
    if labels.size and labels.max() >= classes:
        raise FormatError("label exceeds declared class count", off)
    return Dataset(feats.reshape(count, dim).astype(float),
                   labels.astype(int), classes)


# ---------------------------------------------------------------------------
# IDX loader (big-endian image/label pair)
# ---------------------------------------------------------------------------

def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read the conventional IDX3 image / IDX1 label pair.

    Pixels are scaled to [0, 1]; images are flattened row-major.
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("truncated IDX image header", len(blob))
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != 0x00000803:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", 0)
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise FormatError("truncated IDX image data", len(blob))
    feats = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols,
                          offset=16).reshape(count, rows * cols) / 255.0

    with open(labels_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError("truncated IDX label header", len(blob))
    magic, lcount = struct.unpack_from(">II", blob, 0)
    if magic != 0x00000801:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", 0)
    if lcount != count:
        raise FormatError(f"label count {lcount} != image count {count}", 4)
    if len(blob) < 8 + count:
        raise FormatError("truncated IDX label data", len(blob))
    labels = np.frombuffer(blob, dtype=np.uint8, count=count, offset=8)
    return Dataset(feats, labels.astype(int), num_classes)
