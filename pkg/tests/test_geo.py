import json
import random
from fractions import Fraction

import geojson
import pytest
from hypothesis import given, settings, strategies as st

from oracles import box
from synth import geotagged_jpeg, to_dms
from roaddistress.errors import MalformedExif
from roaddistress.fusion import FusedPrediction
from roaddistress.geo import (TABLE_FIELDS, bin_segments, cell_index, color_bucket, dms_to_degrees, export_geojson,
                              export_html, export_table, extract_gps, read_table, scan_images, segments_geojson)
from roaddistress.model import DistressClass, GeoPoint


def exact_degrees(dms, ref):
    v = sum(Fraction(x) / d for x, d in zip(dms, (1, 60, 3600)))
    return float(-v if ref in "SW" else v)


def test_exif_new_york():
    data = geotagged_jpeg((40, 42, Fraction("46.08")), "N", (74, 0, Fraction("21.6")), "W")
    p = extract_gps(data)
    assert p.latitude == pytest.approx(40.7128, abs=1e-6)
    assert p.longitude == pytest.approx(-74.0060, abs=1e-6)


def test_exif_zero():
    assert extract_gps(geotagged_jpeg((0, 0, 0), "N", (0, 0, 0), "E")) == GeoPoint(0.0, 0.0)


def test_exif_absent(tmp_path):
    assert extract_gps(geotagged_jpeg()) is None
    (tmp_path / "x.jpg").write_bytes(geotagged_jpeg())
    assert extract_gps(tmp_path / "x.jpg") is None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 89), st.integers(0, 59), st.fractions(0, 59, max_denominator=1000),
       st.integers(0, 179), st.integers(0, 59), st.fractions(0, 59, max_denominator=1000),
       st.sampled_from("NS"), st.sampled_from("EW"))
def test_exif_signs_and_values(d1, m1, s1, d2, m2, s2, lat_ref, lon_ref):
    lat_dms, lon_dms = (d1, m1, s1), (d2, m2, s2)
    p = extract_gps(geotagged_jpeg(lat_dms, lat_ref, lon_dms, lon_ref))
    assert p.latitude == pytest.approx(exact_degrees(lat_dms, lat_ref), abs=1e-6)
    assert p.longitude == pytest.approx(exact_degrees(lon_dms, lon_ref), abs=1e-6)
    if lat_ref == "S":
        assert p.latitude <= 0
    if lon_ref == "W":
        assert p.longitude <= 0


def test_exif_malformed():
    with pytest.raises(MalformedExif):
        extract_gps(geotagged_jpeg(raw_gps={2: (40, 42, 46), 4: (74, 0, 21)}))  # refs missing
    with pytest.raises(MalformedExif):
        extract_gps(geotagged_jpeg((40, 42, 46), "X", (74, 0, 21), "W"))
    with pytest.raises(MalformedExif):
        extract_gps(geotagged_jpeg((40, 42, 46), "E", (74, 0, 21), "N"))
    with pytest.raises(MalformedExif):
        extract_gps(b"not a jpeg")


def test_dms_to_degrees():
    assert dms_to_degrees((10, 30, 0), "S") == -10.5
    assert dms_to_degrees((10,), "E") == 10.0
    with pytest.raises(MalformedExif):
        dms_to_degrees((1, 2, 3, 4), "N")
    with pytest.raises(MalformedExif):
        dms_to_degrees((-1, 0, 0), "N")


def test_scan_images(tmp_path):
    (tmp_path / "a.jpg").write_bytes(geotagged_jpeg((1, 0, 0), "N", (2, 0, 0), "E"))
    (tmp_path / "b.JPG").write_bytes(geotagged_jpeg())
    (tmp_path / "c.jpg").write_bytes(b"garbage")
    (tmp_path / "notes.txt").write_text("x")
    got = scan_images(tmp_path, jobs=2)
    assert got == {"a.jpg": GeoPoint(1.0, 2.0), "b.JPG": None, "c.jpg": None}


# binning

def fp(image_id, conf, label=DistressClass.D40):
    return FusedPrediction(image_id, label, conf, box(0, 0, 10, 10))


def test_bin_single_detection():
    b = bin_segments({"a.jpg": GeoPoint(10.0001, 20.0001)}, {"a.jpg": [fp("a.jpg", 0.8)]})
    assert len(b.segments) == 1
    s = b.segments[0]
    assert s.damage_score == 0.8 and s.distress_counts[DistressClass.D40] == 1


def test_bin_no_detections():
    s = bin_segments({"a.jpg": GeoPoint(10.0001, 20.0001)}, {}).segments[0]
    assert s.damage_score == 0 and s.n_detections == 0


def test_bin_two_images_same_cell():
    images = {"a.jpg": GeoPoint(10.0001, 20.0001), "b.jpg": GeoPoint(10.0002, 20.0002)}
    b = bin_segments(images, {"a.jpg": [fp("a.jpg", 0.6)], "b.jpg": [fp("b.jpg", 0.4)]})
    assert len(b.segments) == 1
    assert b.segments[0].severity_sum == 1.0
    assert b.segments[0].damage_score == 0.5


def test_bin_unmapped_reported():
    b = bin_segments({"a.jpg": None, "b.jpg": GeoPoint(0, 0)}, {"a.jpg": [fp("a.jpg", 0.5)], "c.jpg": [fp("c.jpg", 0.5)]})
    assert b.unmapped == ["a.jpg", "c.jpg"]
    assert len(b.segments) == 1 and b.mapped_detections == 0


def test_cell_index_floor():
    assert cell_index(GeoPoint(-0.0001, 0.0001), 0.00025) == (-1, 0)
    assert bin_segments({"a.jpg": GeoPoint(-0.0001, -0.0001)}, {}).segments[0].segment_id == "r-1_c-1"
    with pytest.raises(ValueError):
        bin_segments({}, {}, 0)


def random_geo_set(rng, n=50):
    images, preds = {}, {}
    for k in range(n):
        image_id = f"g{k:03d}.jpg"
        images[image_id] = GeoPoint(40.71 + rng.uniform(0, 0.002), -74.01 + rng.uniform(0, 0.002)) if rng.random() < 0.9 else None
        preds[image_id] = [fp(image_id, round(rng.random(), 3), rng.choice(list(DistressClass)))
                           for _ in range(rng.randrange(5))]
    return images, preds


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_bin_conservation_and_permutation(seed):
    rng = random.Random(seed)
    images, preds = random_geo_set(rng)
    b = bin_segments(images, preds)
    mapped = sum(len(v) for k, v in preds.items() if images.get(k) is not None)
    assert b.mapped_detections == mapped
    assert sum(s.n_images for s in b.segments) + len(b.unmapped) == len(images)
    items = list(images.items())
    rng.shuffle(items)
    shuffled = {k: rng.sample(preds[k], len(preds[k])) for k, _ in items}
    assert bin_segments(dict(items), shuffled) == b


# exports

def test_color_bucket():
    assert color_bucket(0.1) == "green"
    assert color_bucket(0.25) == "yellow"
    assert color_bucket(0.75) == "yellow"
    assert color_bucket(0.8) == "red"
    assert color_bucket(0.5, (0.6, 0.9)) == "green"


def test_geojson_empty(tmp_path):
    doc = export_geojson([], tmp_path / "m.geojson")
    assert doc == {"type": "FeatureCollection", "features": []}
    assert geojson.loads((tmp_path / "m.geojson").read_text()).is_valid


def test_geojson_one_segment(tmp_path):
    seg = bin_segments({"a.jpg": GeoPoint(40.7128, -74.006)}, {"a.jpg": [fp("a.jpg", 0.8)]}).segments
    export_geojson(seg, tmp_path / "m.geojson")
    obj = geojson.loads((tmp_path / "m.geojson").read_text())
    assert obj.is_valid and isinstance(obj, geojson.FeatureCollection)
    props = obj["features"][0]["properties"]
    assert props["damage_score"] == 0.8 and props["color"] == "red"
    assert props["d40"] == 1 and props["n_images"] == 1
    assert obj["features"][0]["geometry"]["coordinates"] == [-74.006, 40.7128]


def test_geojson_polygons_validate():
    images, preds = random_geo_set(random.Random(3))
    doc = segments_geojson(bin_segments(images, preds).segments, cell_size_deg=0.00025)
    obj = geojson.loads(json.dumps(doc))
    assert obj.is_valid
    for f in obj["features"]:
        ring = f["geometry"]["coordinates"][0]
        lon, lat = f["properties"]["lon"], f["properties"]["lat"]
        assert min(x for x, _ in ring) <= lon <= max(x for x, _ in ring)
        assert min(y for _, y in ring) <= lat <= max(y for _, y in ring)


def test_table_header_only(tmp_path):
    export_table([], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == ",".join(TABLE_FIELDS) + "\n"
    assert read_table(tmp_path / "s.csv") == []


def test_table_roundtrip(tmp_path):
    images, preds = random_geo_set(random.Random(5))
    segments = bin_segments(images, preds).segments
    export_table(segments, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert all(len(line.split(",")) == 10 for line in lines)
    assert read_table(tmp_path / "s.csv") == [s.row() for s in segments]
    lat = lines[1].split(",")[1]
    assert len(lat.split(".")[1]) == 6


def test_table_cross_format(tmp_path):
    images, preds = random_geo_set(random.Random(8))
    segments = bin_segments(images, preds).segments
    doc = export_geojson(segments, tmp_path / "m.geojson")
    export_table(segments, tmp_path / "s.csv")
    loaded = json.loads((tmp_path / "m.geojson").read_text())
    assert loaded == doc
    for row, feat in zip(read_table(tmp_path / "s.csv"), loaded["features"], strict=True):
        assert {k: feat["properties"][k] for k in TABLE_FIELDS} == row


def test_html_export(tmp_path):
    seg = bin_segments({"a.jpg": GeoPoint(1, 2)}, {}).segments
    doc = segments_geojson(seg)
    export_html(doc, tmp_path / "m.html", title="<test>")
    text = (tmp_path / "m.html").read_text()
    assert "&lt;test&gt;" in text and '"r4000_c8000"' in text and "leaflet" in text
