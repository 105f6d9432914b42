from __future__ import annotations

import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from auvsurvey import dataset as ds
from auvsurvey.dataset import Annotation, BBox, DatasetManifest, ImageRecord


def _manifest(n, source="other", classes=("fish",), prefix="img", anns_per=0):
    recs = tuple(
        ImageRecord(f"{prefix}{i}", f"{prefix}{i}.jpg", 1920, 1080,
                    tuple(Annotation(0, BBox(0.5, 0.5, 0.1, 0.1)) for _ in range(anns_per)), source)
        for i in range(n)
    )
    return DatasetManifest(recs, classes)


# --- label files -------------------------------------------------------------

def test_parse_single_line():
    assert ds.parse_label_file("0 0.5 0.5 0.2 0.1", "a") == [Annotation(0, BBox(0.5, 0.5, 0.2, 0.1))]


def test_parse_empty_file():
    assert ds.parse_label_file("", "a") == []
    assert ds.parse_label_file("\n  \n", "a") == []


def test_parse_out_of_range_names_field():
    with pytest.raises(ds.ValidationError) as ei:
        ds.parse_label_file("0 1.5 0.5 0.2 0.1", "a")
    assert ei.value.field == "cx"


@pytest.mark.parametrize("text,line_no", [
    ("0 0.5 0.5 0.2", 1),
    ("0 0.5 0.5 0.2 0.1\n0 x 0.5 0.2 0.1", 2),
    ("0.5 0.5 0.5 0.2 0.1", 1),
    ("0 0.5 0.5 0.2 0.1 0.9 7", 1),
])
def test_parse_malformed_reports_line(text, line_no):
    with pytest.raises(ds.LabelParseError) as ei:
        ds.parse_label_file(text, "a")
    assert ei.value.line_no == line_no


def test_parse_confidence_field():
    (a,) = ds.parse_label_file("2 0.1 0.2 0.1 0.2 0.85")
    assert a.class_id == 2 and a.confidence == 0.85


@pytest.mark.parametrize("field_name,args", [
    ("w", (0.5, 0.5, 0.0, 0.1)),
    ("h", (0.5, 0.5, 0.1, 1.2)),
    ("cy", (0.5, -0.1, 0.1, 0.1)),
])
def test_bbox_invariants(field_name, args):
    with pytest.raises(ds.ValidationError) as ei:
        BBox(*args)
    assert ei.value.field == field_name


def test_bbox_edge_centre_still_overlaps_frame():
    BBox(1.0, 0.5, 0.0001, 0.1)
    BBox(0.0, 0.0, 1.0, 1.0)


def test_write_empty():
    assert ds.write_label_file([]) == ""


def test_write_format():
    out = ds.write_label_file([Annotation(0, BBox(0.5, 0.5, 0.2, 0.1))])
    assert out == "0 0.500000 0.500000 0.200000 0.100000\n"


six = st.integers(0, 1_000_000).map(lambda v: round(v / 1e6, 6))
positive = st.integers(1, 1_000_000).map(lambda v: round(v / 1e6, 6))


@st.composite
def annotations(draw):
    cx, cy = draw(six), draw(six)
    w, h = draw(positive), draw(positive)
    conf = draw(st.none() | six)
    try:
        return Annotation(draw(st.integers(0, 20)), BBox(cx, cy, w, h), conf)
    except ds.ValidationError:
        return Annotation(0, BBox(0.5, 0.5, 0.5, 0.5), conf)


@settings(max_examples=100, deadline=None)
@given(st.lists(annotations(), max_size=8))
def test_label_round_trip(anns):
    assert ds.parse_label_file(ds.write_label_file(anns)) == anns


# --- conversion --------------------------------------------------------------

def _row(img, label, x0, y0, x1, y1):
    return {"image_id": img, "label": label, "x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1}


def test_convert_hand_arithmetic():
    res = ds.convert_bbox_table([_row("img1", "fish", 0, 0, 960, 540)], ds.ColumnMapping(), {"img1": (1920, 1080)})
    assert res.annotations == {"img1": [Annotation(0, BBox(0.25, 0.25, 0.5, 0.5))]}
    assert res.class_names == ["fish"]


def test_convert_degenerate_row_rejected():
    res = ds.convert_bbox_table([_row("img1", "fish", 10, 0, 10, 50)], ds.ColumnMapping(), {"img1": (100, 100)})
    assert res.annotations == {}
    assert len(res.rejects) == 1 and "x_max" in res.rejects[0][1]


def test_convert_groups_rows_and_interns_classes():
    rows = [_row("a", "snapper", 0, 0, 10, 10), _row("a", "bream", 20, 20, 40, 40), _row("b", "snapper", 0, 0, 5, 5)]
    res = ds.convert_bbox_table(rows, ds.ColumnMapping(), {"a": (100, 100), "b": (100, 100)})
    assert len(res.annotations["a"]) == 2
    assert res.class_names == ["snapper", "bream"]
    assert [a.class_id for a in res.annotations["a"]] == [0, 1]


def test_convert_collapse_single_class():
    rows = [_row("a", "snapper", 0, 0, 10, 10), _row("a", "bream", 20, 20, 40, 40)]
    res = ds.convert_bbox_table(rows, ds.ColumnMapping(collapse_to="fish"), {"a": (100, 100)})
    assert res.class_names == ["fish"]
    assert {a.class_id for a in res.annotations["a"]} == {0}


def test_convert_missing_dims_lists_orphans():
    rows = [_row("a", "f", 0, 0, 1, 1), _row("zz", "f", 0, 0, 1, 1), _row("b", "f", 0, 0, 1, 1)]
    with pytest.raises(ds.ConversionError) as ei:
        ds.convert_bbox_table(rows, ds.ColumnMapping(), {"a": (10, 10)})
    assert ei.value.orphan_ids == ["b", "zz"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-200, 2200, allow_nan=False)] * 4), max_size=10))
def test_convert_output_valid_or_rejected(boxes):
    rows = [_row("a", "f", *b) for b in boxes]
    res = ds.convert_bbox_table(rows, ds.ColumnMapping(), {"a": (1920, 1080)})
    assert len(res.annotations.get("a", [])) + len(res.rejects) == len(rows)


# --- merge -------------------------------------------------------------------

def test_merge_full_scale_record_count():
    deepfish = _manifest(4505, "deepfish", prefix="df")
    ozfish = _manifest(51217, "ozfish", prefix="oz")
    assert len(ds.merge_manifests([deepfish, ozfish])) == 55722


def test_merge_single_identity():
    m = _manifest(5, anns_per=2)
    assert ds.merge_manifests([m]) == m


def test_merge_collision_prefixes_source():
    a = _manifest(2, "deepfish")
    b = _manifest(3, "ozfish")
    merged = ds.merge_manifests([a, b])
    ids = [r.image_id for r in merged.records]
    assert len(set(ids)) == 5
    assert "deepfish:img0" in ids and "ozfish:img0" in ids and "img2" in ids


def test_merge_shared_class_recount():
    a = DatasetManifest(
        (ImageRecord("a1", "", 10, 10, (Annotation(0, BBox(.5, .5, .1, .1)), Annotation(1, BBox(.5, .5, .2, .2)))),),
        ("fish", "shark"),
    )
    b = DatasetManifest(
        (ImageRecord("b1", "", 10, 10, (Annotation(0, BBox(.5, .5, .1, .1)), Annotation(1, BBox(.4, .4, .1, .1)),
                                         Annotation(1, BBox(.3, .3, .1, .1)))),),
        ("ray", "fish"),
    )
    merged = ds.merge_manifests([a, b])
    assert list(merged.class_names) == ["fish", "shark", "ray"]

    def by_name(m):
        return Counter(m.class_names[x.class_id] for r in m.records for x in r.annotations)

    assert by_name(merged) == by_name(a) + by_name(b)
    assert merged.instance_count == a.instance_count + b.instance_count


# --- split -------------------------------------------------------------------

def test_split_full_scale_sizes():
    m = _manifest(55722)
    train, val = ds.split_manifest(m, 0.85, seed=7)
    assert (len(train), len(val)) == (47364, 8358)
    assert train.split == "train" and val.split == "val"


def test_split_deterministic():
    m = _manifest(200)
    assert ds.split_manifest(m, 0.85, 3) == ds.split_manifest(m, 0.85, 3)
    assert ds.split_manifest(m, 0.85, 3) != ds.split_manifest(m, 0.85, 4)


def test_split_too_small():
    with pytest.raises(ds.DatasetError):
        ds.split_manifest(_manifest(1), 0.85, 0)


def test_round_half_away():
    assert ds.round_half_away(2.5) == 3
    assert ds.round_half_away(0.5) == 1
    assert ds.round_half_away(2.4999) == 2
    # 0.5 * 5 = 2.5 exactly: away from zero gives 3 (banker's rounding would give 2)
    train, _ = ds.split_manifest(_manifest(5), 0.5, 0)
    assert len(train) == 3


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**31))
def test_split_partition_property(n, f, seed):
    m = _manifest(n)
    train, val = ds.split_manifest(m, f, seed)
    ids_t = {r.image_id for r in train.records}
    ids_v = {r.image_id for r in val.records}
    assert not ids_t & ids_v
    assert ids_t | ids_v == {r.image_id for r in m.records}
    assert len(train) == math.floor(f * n + 0.5)


# --- stats -------------------------------------------------------------------

def test_stats_empty():
    s = ds.dataset_stats(DatasetManifest())
    assert s.instance_count == 0 and s.per_class == {}
    assert all(sum(h) == 0 for h in s.histograms.values())


def test_stats_per_class():
    rec = ImageRecord("a", "", 5, 5, (Annotation(0, BBox(.5, .5, .1, .1)), Annotation(0, BBox(.2, .5, .1, .1)),
                                      Annotation(1, BBox(.5, .5, .1, .1))))
    s = ds.dataset_stats(DatasetManifest((rec,), ("a", "b")))
    assert s.per_class == {0: 2, 1: 1}
    assert s.to_dict()["per_class_name"] == {"a": 2, "b": 1}


@settings(max_examples=50, deadline=None)
@given(st.lists(annotations(), max_size=30))
def test_stats_histogram_conservation(anns):
    anns = [Annotation(0, a.bbox) for a in anns]
    s = ds.dataset_stats(DatasetManifest((ImageRecord("a", "", 5, 5, tuple(anns)),), ("x",)))
    for h in s.histograms.values():
        assert len(h) == 50 and sum(h) == s.instance_count == len(anns)


# --- manifest files ----------------------------------------------------------

def test_manifest_json_round_trip(tmp_path):
    rec = ImageRecord("a", "a.jpg", 1920, 1080, (Annotation(0, BBox(.5, .5, .1, .1), 0.5),), "ozfish")
    m = DatasetManifest((rec,), ("fish",), "train")
    ds.save_manifest(m, tmp_path / "m.json")
    assert ds.load_manifest(tmp_path / "m.json") == m


def test_manifest_rejects_unknown_class():
    with pytest.raises(ds.ValidationError):
        DatasetManifest((ImageRecord("a", "", 1, 1, (Annotation(3, BBox(.5, .5, .1, .1)),)),), ("fish",))


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(ds.ValidationError):
        DatasetManifest((ImageRecord("a", "", 1, 1), ImageRecord("a", "", 1, 1)))


# --- integrity ---------------------------------------------------------------

def _png(path, size=(16, 12)):
    from PIL import Image

    Image.new("RGB", size, (10, 20, 30)).save(path)


def test_integrity_clean_pair(tmp_path):
    _png(tmp_path / "a.png")
    (tmp_path / "a.txt").write_text("0 0.5 0.5 0.2 0.2\n")
    assert ds.scan_integrity(tmp_path).issues == []


def test_integrity_yolo_layout(tmp_path):
    (tmp_path / "images" / "train").mkdir(parents=True)
    (tmp_path / "labels" / "train").mkdir(parents=True)
    _png(tmp_path / "images" / "train" / "a.png")
    (tmp_path / "labels" / "train" / "a.txt").write_text("")
    assert ds.scan_integrity(tmp_path).ok


def test_integrity_orphan_label(tmp_path):
    _png(tmp_path / "a.png")
    (tmp_path / "a.txt").write_text("")
    (tmp_path / "b.txt").write_text("")
    issues = ds.scan_integrity(tmp_path).issues
    assert [(i.kind, i.path) for i in issues] == [("orphan-label", "b.txt")]


def test_integrity_truncated_png(tmp_path):
    _png(tmp_path / "a.png", (64, 64))
    data = (tmp_path / "a.png").read_bytes()
    (tmp_path / "b.png").write_bytes(data[: len(data) // 2])
    (tmp_path / "a.txt").write_text("")
    (tmp_path / "b.txt").write_text("")
    issues = ds.scan_integrity(tmp_path).issues
    assert [(i.kind, i.path) for i in issues] == [("corrupt-image", "b.png")]


def test_integrity_truncated_jpeg_and_missing_label(tmp_path):
    from PIL import Image

    Image.new("RGB", (64, 64), (200, 0, 0)).save(tmp_path / "c.jpg")
    data = (tmp_path / "c.jpg").read_bytes()
    (tmp_path / "c.jpg").write_bytes(data[:-40])
    kinds = sorted(i.kind for i in ds.scan_integrity(tmp_path).issues)
    assert kinds == ["corrupt-image", "missing-label"]


def test_integrity_missing_root(tmp_path):
    with pytest.raises(OSError):
        ds.scan_integrity(tmp_path / "nope")


def test_build_manifest_from_dir(tmp_path):
    _png(tmp_path / "a.png", (40, 30))
    (tmp_path / "a.txt").write_text("0 0.5 0.5 0.2 0.2\n")
    _png(tmp_path / "b.png")
    m = ds.build_manifest_from_dir(tmp_path, ["fish"], "deepfish")
    assert [r.image_id for r in m.records] == ["a", "b"]
    assert m.records[0].width_px == 40 and m.instance_count == 1
