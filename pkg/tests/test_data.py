import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrmap.data import (
    ATTRIBUTES,
    SYNTH_KINDS,
    ConfigError,
    Manifest,
    ManifestError,
    Sample,
    SynthSpec,
    format_manifest,
    hflip,
    labels_for,
    load_dataset,
    load_manifest,
    normalize_raw_scores,
    parse_manifest,
    save_manifest,
    split,
    synth_generate,
    synth_sample,
    write_dataset,
)
from attrmap.evaluation import spearman_rho
from oracles import loop_saturation_contrast

HEADER = "path," + ",".join(ATTRIBUTES) + "\n"


def row(path, values):
    return path + "," + ",".join(repr(float(v)) for v in values) + "\n"


# -- manifests --------------------------------------------------------------

def test_header_only_is_empty_manifest():
    assert len(parse_manifest(HEADER)) == 0


def test_overall_out_of_range_names_row():
    bad = [0.0] * 8 + [1.2]
    with pytest.raises(ManifestError, match="row 3"):
        parse_manifest(HEADER + row("a.ppm", [0.0] * 9) + row("b.ppm", bad))


def test_attribute_out_of_range_and_non_numeric():
    with pytest.raises(ManifestError, match="row 2"):
        parse_manifest(HEADER + row("a.ppm", [-1.5] + [0.0] * 8))
    with pytest.raises(ManifestError, match="row 2.*non-numeric"):
        parse_manifest(HEADER + "a.ppm," + ",".join(["x"] * 9) + "\n")


def test_missing_column():
    header = "path," + ",".join(ATTRIBUTES[:-1]) + "\n"
    with pytest.raises(ManifestError, match="overall"):
        parse_manifest(header)


def test_three_row_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    text = HEADER + "".join(
        row(f"img_{i}.ppm", list(rng.uniform(-1, 1, 8)) + [rng.uniform()]) for i in range(3))
    src = tmp_path / "in.csv"
    src.write_text(text)
    m = load_manifest(src)
    save_manifest(m, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_bytes() == src.read_bytes()


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(0, 1)), min_size=0, max_size=5))
def test_format_parse_roundtrip(pairs):
    m = Manifest(ATTRIBUTES, [(f"p{i}.ppm", (a,) * 8 + (o,)) for i, (a, o) in enumerate(pairs)])
    assert parse_manifest(format_manifest(m)).rows == m.rows


def test_normalize_raw_scores():
    base = [0.0] * 8
    assert normalize_raw_scores(base + [1])[-1] == 0.0
    assert normalize_raw_scores(base + [5])[-1] == 1.0
    assert normalize_raw_scores(base + [3])[-1] == 0.5
    assert normalize_raw_scores([-1.0] + [0] * 7 + [2])[0] == -1.0
    with pytest.raises(ValueError):
        normalize_raw_scores(base + [0.5])
    with pytest.raises(ValueError):
        normalize_raw_scores([1.5] + [0] * 7 + [3])


# -- synthetic generators ---------------------------------------------------

def test_label_endpoints():
    vivid = ATTRIBUTES.index("vivid_color")
    assert labels_for("vivid_color", 1.0)[vivid] == 1.0
    assert labels_for("vivid_color", 0.0)[vivid] == -1.0
    assert labels_for("vivid_color", 0.5)[-1] == 0.5


@pytest.mark.parametrize("kind", SYNTH_KINDS)
def test_generation_deterministic_and_in_range(kind):
    spec = SynthSpec(kind, 6, image_size=32, seed=4)
    a, b = synth_generate(spec), synth_generate(spec)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()
        assert x.image.shape == (3, 32, 32)
        assert 0 <= x.image.min() and x.image.max() <= 1
        assert (np.abs(x.labels[:-1]) <= 1).all() and 0 <= x.labels[-1] <= 1
        others = np.delete(x.labels[:-1], ATTRIBUTES.index(kind))
        assert not others.any()
    # any index regenerates alone
    assert synth_sample(kind, 5, 32, 4).image.tobytes() == a[5].image.tobytes()


def test_unknown_kind():
    with pytest.raises(ConfigError):
        SynthSpec("rule_of_thirds", 3)
    with pytest.raises(ConfigError):
        synth_sample("nope", 0)


def test_vivid_saturation_tracks_label():
    samples = synth_generate(SynthSpec("vivid_color", 60, seed=1))
    sat = [np.mean((s.image.max(0) - s.image.min(0)) / np.maximum(s.image.max(0), 1e-6)) for s in samples]
    labels = [s.labels[ATTRIBUTES.index("vivid_color")] for s in samples]
    assert spearman_rho(np.array(sat), np.array(labels)) >= 0.95


def test_object_emphasis_pixel_oracle():
    samples = synth_generate(SynthSpec("object_emphasis", 100, seed=2))
    contrast = [loop_saturation_contrast(s.image, s.meta["bbox"]) for s in samples]
    labels = [s.labels[ATTRIBUTES.index("object_emphasis")] for s in samples]
    assert spearman_rho(np.array(contrast), np.array(labels)) >= 0.95


def test_object_bbox_covers_object():
    s = synth_sample("object_emphasis", 3, 64, 0)
    x0, y0, x1, y1 = s.meta["bbox"]
    assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


# -- flip and split ---------------------------------------------------------

def test_hflip_involution_and_columns():
    s = synth_sample("object_emphasis", 1, 32, 0)
    f = hflip(s)
    assert hflip(f).image.tobytes() == s.image.tobytes()
    assert hflip(f).meta["bbox"] == s.meta["bbox"]
    np.testing.assert_array_equal(f.image.mean(axis=1), s.image.mean(axis=1)[:, ::-1])
    assert f.labels is s.labels


def test_hflip_bbox_reflection():
    s = Sample(np.zeros((3, 10, 10), np.float32), np.zeros(9, np.float32), {"bbox": (1, 2, 5, 6)})
    assert hflip(s).meta["bbox"] == (5, 2, 9, 6)


def test_split_partitions():
    tr, va, te = split(range(10), 8, 1, 1, seed=3)
    assert sorted(tr + va + te) == list(range(10))
    assert split(range(10), 8, 1, 1, seed=3) == (tr, va, te)
    assert split(range(10), 8, 1, 1, seed=4) != (tr, va, te)


def test_split_full_scale_sizes_and_oversubscription():
    tr, va, te = split(range(10000), 8500, 500, 1000, seed=0)
    assert (len(tr), len(va), len(te)) == (8500, 500, 1000)
    with pytest.raises(ConfigError):
        split(range(10), 8, 2, 1)


def test_split_manifest_rows():
    m = Manifest(ATTRIBUTES, [(f"{i}.ppm", (0.0,) * 9) for i in range(5)])
    tr, va, te = split(m, 3, 1, 1)
    assert {r[0] for r in tr + va + te} == {f"{i}.ppm" for i in range(5)}


# -- materialization --------------------------------------------------------

def test_write_and_load_dataset_exact(tmp_path):
    samples = synth_generate(SynthSpec("light", 4, image_size=16, seed=9))
    path = write_dataset(samples, tmp_path / "d")
    back = load_dataset(path)
    assert len(back) == 4
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
