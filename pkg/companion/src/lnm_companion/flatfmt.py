"""Writer (and sanity reader) for the lab's flat binary dataset format.

Implemented standalone against the documented byte layout so the
companion depends on the interface, not the lab package:

  magic "LNMB" | version u32 = 1 | flags u32 (bit0: clean labels) |
  n u64 | d u32 | k u32 | features f32 row-major | observed u16*n |
  clean u16*n iff flagged | split tags u8*n        (little-endian)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LNMB"
VERSION = 1
FLAG_CLEAN = 1
_HEADER = struct.Struct("<4sIIQII")

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class FlatFormatError(Exception):
    pass


def write_flat(path, features: np.ndarray, observed: np.ndarray, k: int,
               clean: np.ndarray | None, split_tags: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, d = features.shape
    observed = np.asarray(observed)
    split_tags = np.asarray(split_tags, dtype="u1")
    if observed.shape != (n,) or split_tags.shape != (n,):
        raise FlatFormatError("label/tag arrays must match the feature rows")
    if k > 0xFFFF:
        raise FlatFormatError("format stores labels as u16")
    for name, arr in (("observed", observed),) + ((("clean", clean),) if clean is not None else ()):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise FlatFormatError(f"{name} labels outside [0, {k})")
    flags = FLAG_CLEAN if clean is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, n, d, k))
        fh.write(features.tobytes())
        fh.write(observed.astype("<u2").tobytes())
        if clean is not None:
            fh.write(np.asarray(clean).astype("<u2").tobytes())
        fh.write(split_tags.tobytes())


def read_flat(path):
    """Minimal reader used for the converter's own round-trip check."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FlatFormatError(f"bad magic {buf[:4]!r}")
    magic, version, flags, n, d, k = _HEADER.unpack(buf[:_HEADER.size])
    if version != VERSION:
        raise FlatFormatError(f"unsupported version {version}")
    off = _HEADER.size
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    observed = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    clean = None
    if flags & FLAG_CLEAN:
        clean = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
    tags = np.frombuffer(buf, dtype="u1", count=n, offset=off)
    off += n
    if off != len(buf):
        raise FlatFormatError("trailing bytes")
    return feats.copy(), observed, int(k), clean, tags.copy()
