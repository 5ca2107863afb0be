import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lnm import data
from lnm.errors import (
    ConfigError,
    DomainError,
    EmptyClassError,
    FormatError,
    LabelRangeError,
    StratificationError,
)
from lnm.rng import Stream


def blobs(seed=0, **kw):
    args = dict(k=3, n_per_class=50, d=4, spread=1.0)
    args.update(kw)
    return data.make_blobs(rng=Stream(seed).generator(), **args)


def test_blobs_same_seed_bitwise_identical():
    a, b = blobs(seed=42), blobs(seed=42)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.observed_labels, b.observed_labels)


def test_blobs_tiny_spread_linearly_separable():
    ds = blobs(seed=1, k=2, spread=1e-9)
    ds = data.stratified_split(ds, (0.8, 0.1, 0.1), Stream(2).generator())
    tr = ds.split_indices("train")
    x, y = ds.features[tr].astype(np.float64), ds.observed_labels[tr]
    # nearest-centroid is linear for two classes
    c0 = x[y == 0].mean(axis=0)
    c1 = x[y == 1].mean(axis=0)
    pred = (np.linalg.norm(x - c1, axis=1) < np.linalg.norm(x - c0, axis=1)).astype(int)
    assert (pred == y).mean() == 1.0


def test_blobs_rejects_empty_class():
    with pytest.raises(EmptyClassError):
        blobs(n_per_class=0)


def test_long_tail_ratio_one_keeps_counts():
    ds = blobs(seed=3)
    out = data.long_tail(ds, 1.0, Stream(4).generator())
    hist = data.class_histogram(out.observed_labels, out.k)
    assert list(hist.counts) == [50, 50, 50]


def test_long_tail_matches_decay_formula():
    # k=9, head 9000, ratio 100 -> tail floor(9000/100) = 90; mid j=4 -> 900
    counts = data.long_tail_counts(9000, 9, 100.0)
    assert counts[8] == 90
    assert counts[4] == int(np.floor(9000 * 100 ** (-0.5)))
    assert counts[4] == 900


def test_long_tail_histogram_matches_independent_floors():
    ds = blobs(seed=5, k=5, n_per_class=200)
    out = data.long_tail(ds, 10.0, Stream(6).generator())
    hist = data.class_histogram(out.observed_labels, out.k)
    expect = [int(np.floor(200 * 10 ** (-j / 4))) for j in range(5)]
    assert list(hist.counts) == expect


@pytest.mark.parametrize("ratio", [1.0, 10.0, 100.0])
def test_long_tail_imbalance_ratio_invariant(ratio):
    ds = blobs(seed=7, k=4, n_per_class=1000)
    out = data.long_tail(ds, ratio, Stream(8).generator())
    hist = data.class_histogram(out.observed_labels, out.k)
    realized = hist.counts.max() / hist.counts.min()
    # floor rounding perturbs the ratio by at most one tail unit
    lo = 1000 * ratio ** (-1.0)
    assert 1000 / (hist.counts.min() + 1) <= realized <= 1000 / max(lo - 1, 1)


def test_long_tail_empty_class_error():
    ds = blobs(seed=9, k=3, n_per_class=5)
    with pytest.raises(EmptyClassError, match="class 1"):
        data.long_tail(ds, 1000.0, Stream(1).generator())


def test_long_tail_within_split_only_touches_train():
    ds = blobs(seed=10, k=3, n_per_class=100)
    ds = data.stratified_split(ds, (0.6, 0.2, 0.2), Stream(11).generator())
    out = data.long_tail(ds, 10.0, Stream(12).generator(), within_split="train")
    for split in ("val", "test"):
        assert out.split_indices(split).size == ds.split_indices(split).size
    tr_hist = data.class_histogram(out.observed_labels[out.split_indices("train")], 3)
    assert list(tr_hist.counts) == [int(np.floor(60 * 10 ** (-j / 2))) for j in range(3)]


def test_split_rejects_degenerate_fractions():
    ds = blobs()
    with pytest.raises(ConfigError):
        data.stratified_split(ds, (1.0, 0.0, 0.0), Stream(0).generator())


def test_split_exact_proportions():
    ds = blobs(seed=13, k=3, n_per_class=100)
    out = data.stratified_split(ds, (0.8, 0.1, 0.1), Stream(14).generator())
    for c in range(3):
        mask = out.observed_labels == c
        assert (out.split_tags[mask] == data.SPLIT_TRAIN).sum() == 80
        assert (out.split_tags[mask] == data.SPLIT_VAL).sum() == 10
        assert (out.split_tags[mask] == data.SPLIT_TEST).sum() == 10


def test_split_same_seed_identical_tags():
    ds = blobs(seed=15)
    a = data.stratified_split(ds, (0.7, 0.15, 0.15), Stream(16).generator())
    b = data.stratified_split(ds, (0.7, 0.15, 0.15), Stream(16).generator())
    assert np.array_equal(a.split_tags, b.split_tags)


def test_split_proportions_within_one_sample():
    ds = blobs(seed=17, k=4, n_per_class=53)
    out = data.stratified_split(ds, (0.7, 0.15, 0.15), Stream(18).generator())
    for c in range(4):
        mask = out.observed_labels == c
        n_val = (out.split_tags[mask] == data.SPLIT_VAL).sum()
        n_test = (out.split_tags[mask] == data.SPLIT_TEST).sum()
        assert abs(n_val - 53 * 0.15) <= 1
        assert abs(n_test - 53 * 0.15) <= 1


def test_split_error_when_split_empty():
    ds = blobs(seed=19, k=2, n_per_class=3)
    with pytest.raises(StratificationError):
        data.stratified_split(ds, (0.98, 0.01, 0.01), Stream(20).generator())


def test_histogram_basics():
    assert list(data.class_histogram([], 3).counts) == [0, 0, 0]
    assert list(data.class_histogram([0, 0, 1], 3).counts) == [2, 1, 0]
    with pytest.raises(LabelRangeError):
        data.class_histogram([0, 5], 3)


def test_flat_round_trip_all_fields(tmp_path):
    ds = blobs(seed=21, k=3, n_per_class=20)
    ds = data.stratified_split(ds, (0.6, 0.2, 0.2), Stream(22).generator())
    noisy = ds.observed_labels.copy()
    noisy[0] = (noisy[0] + 1) % 3
    ds = ds.with_observed(noisy)
    path = tmp_path / "ds.lnmb"
    data.save_flat(ds, path)
    back = data.load_flat(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.observed_labels, ds.observed_labels)
    assert np.array_equal(back.clean_labels, ds.clean_labels)
    assert np.array_equal(back.split_tags, ds.split_tags)
    assert back.k == ds.k


def test_flat_magic_bytes(tmp_path):
    ds = blobs(seed=23)
    path = tmp_path / "ds.lnmb"
    data.save_flat(ds, path)
    assert path.read_bytes()[:4] == b"LNMB"


def test_flat_truncation_is_atomic(tmp_path):
    ds = blobs(seed=24)
    path = tmp_path / "ds.lnmb"
    data.save_flat(ds, path)
    raw = path.read_bytes()
    cut = tmp_path / "cut.lnmb"
    cut.write_bytes(raw[: 24 + ds.n * ds.d * 2])  # mid-features
    with pytest.raises(FormatError) as exc:
        data.load_flat(cut)
    assert exc.value.offset is not None


def test_flat_bad_magic_and_version(tmp_path):
    ds = blobs(seed=25)
    path = tmp_path / "ds.lnmb"
    data.save_flat(ds, path)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.lnmb"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError, match="magic"):
        data.load_flat(bad)
    raw[4] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        data.load_flat(bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 30), st.integers(1, 6),
       st.booleans(), st.integers(0, 2 ** 32 - 1))
def test_flat_round_trip_property(k, n, d, with_clean, seed):
    rng = Stream(seed).generator()
    feats = rng.normal(size=(n, d)).astype(np.float32)
    obs = rng.integers(0, k, size=n)
    clean = rng.integers(0, k, size=n) if with_clean else None
    tags = rng.integers(0, 3, size=n).astype(np.uint8)
    ds = data.LabeledDataset(feats, obs, k, clean, tags)
    import io, tempfile, os
    fd, path = tempfile.mkstemp(suffix=".lnmb")
    os.close(fd)
    try:
        data.save_flat(ds, path)
        back = data.load_flat(path)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.observed_labels, ds.observed_labels)
        if with_clean:
            assert np.array_equal(back.clean_labels, ds.clean_labels)
        else:
            assert back.clean_labels is None
        assert np.array_equal(back.split_tags, ds.split_tags)
    finally:
        os.unlink(path)


def test_dataset_arrays_immutable():
    ds = blobs(seed=26)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        ds.observed_labels[0] = 1
