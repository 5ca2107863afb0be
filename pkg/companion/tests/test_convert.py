import os

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from lnm_companion.cli import main
from lnm_companion.convert import ConversionError, convert, manifest_from_dict
from lnm_companion.flatfmt import read_flat

# the converter's outputs must be accepted by the lab package itself
from lnm.data import class_histogram, load_flat

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def load_manifest(name):
    path = os.path.join(FIXTURES, name)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return manifest_from_dict(raw, base_dir=FIXTURES)


def test_npz_fixture_converts_and_validates(tmp_path):
    out = str(tmp_path / "archive100.lnmb")
    report = convert(load_manifest("archive100.toml"), out_path=out)
    ds = load_flat(out)  # primary-package validation
    assert ds.n == 100 and ds.k == 3
    # histogram of the converted file matches the manifest's class mapping
    archive = np.load(os.path.join(FIXTURES, "archive100.npz"))
    expected = np.bincount([int(s[-1]) for s in archive["community"]], minlength=3)
    hist = class_histogram(ds.observed_labels, ds.k)
    assert list(hist.counts) == list(expected)
    assert report.per_class_counts == list(expected)


def test_npz_dual_labels_set_clean_channel(tmp_path):
    out = str(tmp_path / "dual.lnmb")
    report = convert(load_manifest("archive100.toml"), out_path=out)
    assert report.has_clean
    ds = load_flat(out)
    assert ds.clean_labels is not None
    archive = np.load(os.path.join(FIXTURES, "archive100.npz"))
    community = np.array([int(s[-1]) for s in archive["community"]])
    expert = np.array([int(s[-1]) for s in archive["expert"]])
    assert np.array_equal(ds.observed_labels, community)
    assert np.array_equal(ds.clean_labels, expert)
    disagree = community != expert
    assert np.any(disagree)
    assert np.array_equal(ds.observed_labels != ds.clean_labels, disagree)
    assert report.disagreement == pytest.approx(disagree.mean())


def test_features_scaled_to_unit_interval(tmp_path):
    out = str(tmp_path / "scaled.lnmb")
    convert(load_manifest("archive100.toml"), out_path=out)
    ds = load_flat(out)
    assert float(ds.features.min()) == 0.0
    assert float(ds.features.max()) == 1.0


def test_image_folder_fixture(tmp_path):
    out = str(tmp_path / "images.lnmb")
    report = convert(load_manifest("images.toml"), out_path=out)
    ds = load_flat(out)
    assert ds.n == 4 and ds.d == 64 and ds.k == 2
    assert report.per_class_counts == [2, 2]
    # explicit split column honored
    assert list(ds.split_tags) == [0, 0, 1, 2]
    assert ds.clean_labels is None


def test_conversion_deterministic(tmp_path):
    a = str(tmp_path / "a.lnmb")
    b = str(tmp_path / "b.lnmb")
    convert(load_manifest("archive100.toml"), out_path=a)
    convert(load_manifest("archive100.toml"), out_path=b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_unmappable_labels_listed(tmp_path):
    m = load_manifest("archive100.toml")
    m.class_map = {"grade0": 0, "grade1": 1}  # drop grade2
    with pytest.raises(ConversionError, match="grade2"):
        convert(m, out_path=str(tmp_path / "x.lnmb"))


def test_class_map_must_be_bijection():
    with pytest.raises(ConversionError, match="0..k-1"):
        manifest_from_dict({"source": "x.npz", "layout": "npz",
                            "class_map": {"a": 0, "b": 2}})


def test_unknown_manifest_field_rejected():
    with pytest.raises(ConversionError, match="unknown manifest"):
        manifest_from_dict({"source": "x.npz", "layout": "npz",
                            "class_map": {"a": 0}, "shiny": 1})


def test_fractional_split_covers_every_record(tmp_path):
    out = str(tmp_path / "frac.lnmb")
    report = convert(load_manifest("archive100.toml"), out_path=out)
    assert sum(report.split_counts.values()) == 100
    feats, observed, k, clean, tags = read_flat(out)
    assert set(np.unique(tags)) <= {0, 1, 2}


def test_cli_convert(tmp_path):
    out = str(tmp_path / "cli.lnmb")
    report_path = str(tmp_path / "report.json")
    code = main(["convert", "--manifest", os.path.join(FIXTURES, "archive100.toml"),
                 "--out", out, "--report", report_path])
    assert code == 0
    assert load_flat(out).n == 100
    assert os.path.exists(report_path)


def test_cli_convert_bad_manifest(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('source = "x.npz"\nlayout = "weird"\n[class_map]\na = 0\n')
    assert main(["convert", "--manifest", str(bad)]) == 2
