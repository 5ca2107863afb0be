"""Dataset container, synthetic blobs, long-tail subsampling, splits, and
the flat binary interchange format.

The flat format is the single way datasets enter the harness from outside:
little-endian, magic "LNMB", version 1. See ``save_flat`` for the exact
layout. Round trips are bit-exact, including float32 features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    EmptyClassError,
    FormatError,
    LabelRangeError,
    ShapeError,
    StratificationError,
)

MAGIC = b"LNMB"
VERSION = 1
FLAG_CLEAN_LABELS = 1

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}


@dataclass
class LabeledDataset:
    """Features with observed (possibly noisy) labels and optional clean truth."""

    features: np.ndarray          # float32 [n, d]
    observed_labels: np.ndarray   # int64 [n], values in [0, k)
    k: int
    clean_labels: np.ndarray | None = None
    split_tags: np.ndarray | None = None  # uint8 [n] of SPLIT_* values

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.observed_labels.shape != (n,):
            raise ShapeError("observed_labels length does not match feature rows")
        if not np.isfinite(self.features).all():
            raise DomainError("features must be finite")
        _check_label_range(self.observed_labels, self.k)
        if self.clean_labels is not None:
            self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
            if self.clean_labels.shape != (n,):
                raise ShapeError("clean_labels length does not match feature rows")
            _check_label_range(self.clean_labels, self.k)
        if self.split_tags is None:
            self.split_tags = np.zeros(n, dtype=np.uint8)
        else:
            self.split_tags = np.asarray(self.split_tags, dtype=np.uint8)
            if self.split_tags.shape != (n,):
                raise ShapeError("split_tags length does not match feature rows")
            if n and self.split_tags.max() > SPLIT_TEST:
                raise DomainError("split_tags must be 0 (train), 1 (val) or 2 (test)")
        for arr in (self.features, self.observed_labels, self.split_tags):
            arr.setflags(write=False)
        if self.clean_labels is not None:
            self.clean_labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split_tags == SPLIT_NAMES[split])

    def with_observed(self, observed: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, observed, self.k, self.clean_labels, self.split_tags)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            self.features[idx],
            self.observed_labels[idx],
            self.k,
            None if self.clean_labels is None else self.clean_labels[idx],
            self.split_tags[idx],
        )


@dataclass
class ClassHistogram:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _check_label_range(labels: np.ndarray, k: int):
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelRangeError(f"label outside [0, {k})")


def class_histogram(labels, k: int) -> ClassHistogram:
    """Exact per-class counts."""
    arr = np.asarray(labels, dtype=np.int64)
    _check_label_range(arr, k)
    return ClassHistogram(np.bincount(arr, minlength=k).astype(np.int64))


def make_blobs(k: int, n_per_class: int, d: int, spread: float,
               rng: np.random.Generator, center_scale: float = 2.5) -> LabeledDataset:
    """Isotropic Gaussian clusters, one per class, at seeded random centers.

    Centers are drawn N(0, center_scale^2 I) and redrawn if any pair nearly
    coincides. Labels start clean (observed == clean).
    """
    if k < 2:
        raise DomainError(f"need k >= 2 classes, got {k}")
    if d < 2:
        raise DomainError(f"need d >= 2 features, got {d}")
    if n_per_class < 1:
        raise EmptyClassError("n_per_class must be at least 1")
    if spread <= 0:
        raise DomainError("spread must be positive")
    for _ in range(100):
        centers = rng.normal(0.0, center_scale, size=(k, d))
        dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        if dists[np.triu_indices(k, 1)].min() > 1e-6:
            break
    else:  # pragma: no cover - 100 consecutive coincidences
        raise DomainError("could not draw pairwise-distinct centers")
    feats = np.empty((k * n_per_class, d), dtype=np.float32)
    labels = np.repeat(np.arange(k, dtype=np.int64), n_per_class)
    for c in range(k):
        block = rng.normal(centers[c], spread, size=(n_per_class, d))
        feats[c * n_per_class:(c + 1) * n_per_class] = block.astype(np.float32)
    return LabeledDataset(feats, labels, k, clean_labels=labels.copy())


def long_tail_counts(n_head: int, k: int, ratio: float) -> list[int]:
    """Exponential-decay target counts: class j keeps floor(n_head * ratio^(-j/(k-1)))."""
    return [int(np.floor(n_head * ratio ** (-j / (k - 1)))) for j in range(k)]


def long_tail(ds: LabeledDataset, ratio: float, rng: np.random.Generator,
              by_count_desc: bool = False, within_split: str | None = None) -> LabeledDataset:
    """Downsample classes on an exponential decay so head/tail counts differ by ~ratio.

    Class order follows the label index (class 0 = head) unless
    ``by_count_desc`` reorders classes by descending count first. With
    ``within_split`` set, only samples tagged with that split are
    downsampled; the rest pass through untouched.
    """
    if ratio < 1:
        raise DomainError(f"imbalance ratio must be >= 1, got {ratio}")
    labels = ds.clean_labels if ds.clean_labels is not None else ds.observed_labels
    if within_split is None:
        pool = np.arange(ds.n)
    else:
        pool = ds.split_indices(within_split)
    counts = np.bincount(labels[pool], minlength=ds.k)
    order = np.argsort(-counts, kind="stable") if by_count_desc else np.arange(ds.k)
    n_head = int(counts[order[0]])
    targets = long_tail_counts(n_head, ds.k, ratio)
    keep_mask = np.ones(ds.n, dtype=bool)
    keep_mask[pool] = False
    for pos, cls in enumerate(order):
        want = min(targets[pos], int(counts[cls]))
        if want == 0:
            raise EmptyClassError(f"long_tail would leave class {int(cls)} empty")
        members = pool[labels[pool] == cls]
        chosen = rng.permutation(members)[:want]
        keep_mask[chosen] = True
    return ds.subset(np.flatnonzero(keep_mask))


def stratified_split(ds: LabeledDataset, fractions: tuple[float, float, float],
                     rng: np.random.Generator) -> LabeledDataset:
    """Tag samples train/val/test with per-class proportional allocation.

    Rounding residue goes to train. All three fractions must be positive so
    validation-based checkpoint selection stays possible.
    """
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0:
        raise ConfigError("all split fractions must be positive (val/test feed evaluation)")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    labels = ds.clean_labels if ds.clean_labels is not None else ds.observed_labels
    tags = np.empty(ds.n, dtype=np.uint8)
    for c in range(ds.k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise StratificationError(f"class {c} has no samples to split")
        members = rng.permutation(members)
        n_val = int(np.floor(members.size * f_val))
        n_test = int(np.floor(members.size * f_test))
        tags[members[:n_val]] = SPLIT_VAL
        tags[members[n_val:n_val + n_test]] = SPLIT_TEST
        tags[members[n_val + n_test:]] = SPLIT_TRAIN
    for name, code in SPLIT_NAMES.items():
        if not np.any(tags == code):
            raise StratificationError(f"{name} split came out empty; dataset too small "
                                      f"for fractions {fractions}")
    return LabeledDataset(ds.features, ds.observed_labels, ds.k, ds.clean_labels, tags)


_HEADER = struct.Struct("<4sIIQII")  # magic, version, flags, n, d, k


def save_flat(ds: LabeledDataset, path) -> None:
    """Write the flat binary format.

    Layout (little-endian):
      magic "LNMB" | version u32 | flags u32 (bit0: clean labels present) |
      n u64 | d u32 | k u32 | features f32 row-major | observed u16*n |
      clean u16*n iff flag | split tags u8*n.
    """
    if ds.k > 0xFFFF:
        raise FormatError("flat format stores labels as u16; k too large")
    flags = FLAG_CLEAN_LABELS if ds.clean_labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, ds.n, ds.d, ds.k))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(ds.observed_labels.astype("<u2").tobytes())
        if ds.clean_labels is not None:
            fh.write(ds.clean_labels.astype("<u2").tobytes())
        fh.write(ds.split_tags.astype("u1").tobytes())


def _take(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise FormatError(f"truncated file: {what} needs {size} bytes at offset {offset}, "
                          f"file has {len(buf)}", offset=offset)
    return buf[offset:offset + size], offset + size


def load_flat(path) -> LabeledDataset:
    """Read a flat binary file; inverse of save_flat, bit-exact."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, _HEADER.size, "header")
    magic, version, flags, n, d, k = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    raw, offset = _take(buf, offset, 4 * n * d, "features")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, d)
    raw, offset = _take(buf, offset, 2 * n, "observed labels")
    observed = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    clean = None
    if flags & FLAG_CLEAN_LABELS:
        raw, offset = _take(buf, offset, 2 * n, "clean labels")
        clean = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    raw, offset = _take(buf, offset, n, "split tags")
    tags = np.frombuffer(raw, dtype="u1")
    if offset != len(buf):
        raise FormatError(f"trailing bytes after payload", offset=offset)
    return LabeledDataset(feats.copy(), observed, int(k), clean, tags.copy())
