"""Manifest-driven conversion of public archive bundles to the flat format.

Two source layouts:
  npz           — a compressed numpy archive holding a feature/image array
                  and label arrays;
  image_folder  — a directory of images plus a CSV label table.

The manifest (TOML) carries the class map (a bijection onto 0..k-1), the
split assignment rule (an explicit per-record column/array, or seeded
stratified fractions), and optionally a second "clean"/expert label
source for datasets with dual annotations.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .flatfmt import SPLIT_CODES, write_flat

DEFAULT_IMAGE_SIDE = 28


class ConversionError(Exception):
    pass


@dataclass
class Manifest:
    source: str
    layout: str                         # npz | image_folder
    class_map: dict                     # source label value -> class index
    out: str | None = None
    image_side: int = DEFAULT_IMAGE_SIDE
    # npz keys
    features_key: str = "features"
    observed_key: str = "labels"
    clean_key: str | None = None
    split_key: str | None = None
    # image_folder table
    table: str | None = None
    file_column: str = "file"
    observed_column: str = "label"
    clean_column: str | None = None
    split_column: str | None = None
    # fallback split rule
    fractions: tuple = (0.7, 0.15, 0.15)
    split_seed: int = 0

    def __post_init__(self):
        if self.layout not in ("npz", "image_folder"):
            raise ConversionError(f"unknown layout {self.layout!r}")
        values = sorted(self.class_map.values())
        if values != list(range(len(values))):
            raise ConversionError(
                f"class_map values must be exactly 0..k-1, got {values}")
        self.class_map = {str(k): int(v) for k, v in self.class_map.items()}

    @property
    def k(self) -> int:
        return len(self.class_map)


def manifest_from_dict(raw: dict, base_dir: str = ".") -> Manifest:
    raw = dict(raw)
    split = raw.pop("split", {})
    labels = raw.pop("labels", {})
    merged = {**raw}
    for src, keys in ((split, ("fractions", "seed", "column", "key")),
                      (labels, ("table", "file_column", "observed_column",
                                "clean_column", "observed_key", "clean_key"))):
        for key in keys:
            if key in src:
                name = {"seed": "split_seed", "column": "split_column",
                        "key": "split_key"}.get(key, key)
                merged[name] = src[key]
    allowed = set(Manifest.__dataclass_fields__)
    unknown = set(merged) - allowed
    if unknown:
        raise ConversionError(f"unknown manifest fields: {sorted(unknown)}")
    m = Manifest(**merged)
    m.source = os.path.join(base_dir, m.source)
    if m.table:
        m.table = os.path.join(base_dir, m.table)
    return m


def _map_labels(raw_labels, class_map: dict, what: str) -> np.ndarray:
    out = np.empty(len(raw_labels), dtype=np.int64)
    unmappable = []
    for i, value in enumerate(raw_labels):
        key = str(value)
        if key not in class_map:
            unmappable.append(value)
        else:
            out[i] = class_map[key]
    if unmappable:
        offenders = sorted({str(v) for v in unmappable})
        raise ConversionError(f"unmappable {what} labels: {offenders[:20]}")
    return out


def _assign_splits(n: int, labels: np.ndarray, explicit, fractions, seed: int) -> np.ndarray:
    if explicit is not None:
        tags = np.empty(n, dtype=np.uint8)
        for i, value in enumerate(explicit):
            name = str(value).lower()
            if name in SPLIT_CODES:
                tags[i] = SPLIT_CODES[name]
            elif name in ("0", "1", "2"):
                tags[i] = int(name)
            else:
                raise ConversionError(f"record {i} has unknown split {value!r}")
        return tags
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConversionError(f"bad split fractions {fractions}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    tags = np.zeros(n, dtype=np.uint8)
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(np.floor(members.size * f_val))
        n_test = int(np.floor(members.size * f_test))
        tags[members[:n_val]] = SPLIT_CODES["val"]
        tags[members[n_val:n_val + n_test]] = SPLIT_CODES["test"]
    return tags


def _scale_unit(features: np.ndarray) -> np.ndarray:
    lo = float(features.min())
    hi = float(features.max())
    if hi - lo < 1e-12:
        return np.zeros_like(features, dtype=np.float32)
    return ((features - lo) / (hi - lo)).astype(np.float32)


def _load_npz(manifest: Manifest):
    archive = np.load(manifest.source, allow_pickle=False)
    if manifest.features_key not in archive:
        raise ConversionError(f"npz lacks array {manifest.features_key!r}")
    if manifest.observed_key not in archive:
        raise ConversionError(f"npz lacks array {manifest.observed_key!r}")
    features = np.asarray(archive[manifest.features_key], dtype=np.float64)
    features = features.reshape(features.shape[0], -1)
    observed_raw = archive[manifest.observed_key]
    clean_raw = archive[manifest.clean_key] if manifest.clean_key else None
    split_raw = archive[manifest.split_key] if manifest.split_key else None
    return features, observed_raw, clean_raw, split_raw


def _load_image_folder(manifest: Manifest):
    if not manifest.table:
        raise ConversionError("image_folder layout needs a labels.table CSV")
    with open(manifest.table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConversionError("label table is empty")
    for col in (manifest.file_column, manifest.observed_column):
        if col not in rows[0]:
            raise ConversionError(f"label table lacks column {col!r}")
    side = manifest.image_side
    feats = []
    for row in rows:
        path = os.path.join(manifest.source, row[manifest.file_column])
        with Image.open(path) as img:
            img = img.convert("L").resize((side, side), Image.BILINEAR)
            feats.append(np.asarray(img, dtype=np.float64).reshape(-1))
    features = np.stack(feats)
    observed_raw = [row[manifest.observed_column] for row in rows]
    clean_raw = None
    if manifest.clean_column:
        if manifest.clean_column not in rows[0]:
            raise ConversionError(f"label table lacks column {manifest.clean_column!r}")
        clean_raw = [row[manifest.clean_column] for row in rows]
    split_raw = None
    if manifest.split_column:
        if manifest.split_column not in rows[0]:
            raise ConversionError(f"label table lacks column {manifest.split_column!r}")
        split_raw = [row[manifest.split_column] for row in rows]
    return features, observed_raw, clean_raw, split_raw


@dataclass
class ConversionReport:
    path: str
    n: int
    d: int
    k: int
    per_class_counts: list
    has_clean: bool
    disagreement: float | None = None
    split_counts: dict = field(default_factory=dict)


def convert(manifest: Manifest, out_path: str | None = None) -> ConversionReport:
    """Convert the manifest's source to a flat binary file."""
    loader = _load_npz if manifest.layout == "npz" else _load_image_folder
    features, observed_raw, clean_raw, split_raw = loader(manifest)
    observed = _map_labels(list(observed_raw), manifest.class_map, "observed")
    clean = None
    if clean_raw is not None:
        clean = _map_labels(list(clean_raw), manifest.class_map, "clean")
        if clean.shape != observed.shape:
            raise ConversionError("observed and clean label sources disagree in length")
    if features.shape[0] != observed.shape[0]:
        raise ConversionError("feature rows and labels disagree in length")
    features = _scale_unit(features)
    strat_labels = clean if clean is not None else observed
    tags = _assign_splits(features.shape[0], strat_labels, split_raw,
                          manifest.fractions, manifest.split_seed)
    out = out_path or manifest.out
    if not out:
        raise ConversionError("no output path given")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_flat(out, features, observed, manifest.k, clean, tags)
    counts = np.bincount(observed, minlength=manifest.k)
    report = ConversionReport(
        path=out,
        n=features.shape[0],
        d=features.shape[1],
        k=manifest.k,
        per_class_counts=[int(c) for c in counts],
        has_clean=clean is not None,
        disagreement=float(np.mean(observed != clean)) if clean is not None else None,
        split_counts={name: int((tags == code).sum()) for name, code in SPLIT_CODES.items()},
    )
    return report
