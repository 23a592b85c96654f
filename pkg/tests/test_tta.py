import dataclasses
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import box
from roaddistress.errors import ParseError, UnknownView
from roaddistress.model import Detection, DistressClass, ImageMeta
from roaddistress.tta import (CANONICAL_VIEWS, HFLIP, IDENTITY, SCALE_067, SCALE_083, SCALE_130, AugmentedView,
                              ViewManifest, deaugment, forward_box, load_manifest, save_manifest)


def det(b, view="identity"):
    return Detection("img1.jpg", DistressClass.D20, 0.42, b, "m3", view)


def test_forward_examples(meta600):
    assert forward_box(box(10, 20, 30, 40), HFLIP, meta600) == box(570, 20, 590, 40)
    assert forward_box(box(10, 20, 30, 40), IDENTITY, meta600) == box(10, 20, 30, 40)
    got = forward_box(box(10, 20, 30, 40), SCALE_067, meta600).as_tuple()
    assert got == pytest.approx((6.7, 13.4, 20.1, 26.8), abs=1e-12)


def test_deaugment_examples(meta600):
    assert deaugment(det(box(570, 20, 590, 40), "hflip"), HFLIP, meta600).bbox == box(10, 20, 30, 40)
    d = det(box(10, 20, 30, 40))
    assert deaugment(d, IDENTITY, meta600) == d
    got = deaugment(det(box(13, 26, 39, 52), "scale_130"), SCALE_130, meta600).bbox.as_tuple()
    assert got == pytest.approx((10, 20, 30, 40), abs=1e-9)


def test_deaugment_clamps_upscaled_overflow(meta600):
    # a 1.30x view is 780 px wide; a box at its right edge maps past 600 only through detector noise
    d = det(box(700, 10, 790, 50), "scale_130")
    out = deaugment(d, SCALE_130, meta600)
    assert out.bbox.x_max == 600.0
    assert out.bbox.x_min == pytest.approx(700 / 1.3)


def test_deaugment_preserves_provenance(meta600):
    d = det(box(100, 100, 200, 180), "scale_083")
    out = deaugment(d, SCALE_083, meta600)
    assert (out.image_id, out.label, out.confidence, out.model_id, out.view_id) == \
        (d.image_id, d.label, d.confidence, d.model_id, d.view_id)


def test_view_sizes():
    meta = ImageMeta("a", 600, 600)
    sizes = ViewManifest.full().view_sizes(meta)
    # round half up of 780, 498, 402
    assert sizes == {"identity": (600, 600), "hflip": (600, 600), "scale_130": (780, 780),
                     "scale_083": (498, 498), "scale_067": (402, 402)}
    assert SCALE_083.size(ImageMeta("b", 720, 720)) == (598, 598)  # 597.6
    assert SCALE_067.size(ImageMeta("b", 720, 720)) == (482, 482)  # 482.4


def test_canonical_views():
    assert list(CANONICAL_VIEWS) == ["identity", "hflip", "scale_130", "scale_083", "scale_067"]
    assert [v.scale for v in CANONICAL_VIEWS.values()] == [1.0, 1.0, 1.30, 0.83, 0.67]
    assert not any(v.flipped for v in CANONICAL_VIEWS.values() if v.view_id != "hflip")


def test_manifest_validation():
    with pytest.raises(ValueError):
        ViewManifest([HFLIP])  # no identity
    with pytest.raises(ValueError):
        ViewManifest([IDENTITY, HFLIP, HFLIP])
    with pytest.raises(ValueError):
        ViewManifest([IDENTITY, AugmentedView("vflip", flipped=True)])
    with pytest.raises(ValueError):
        ViewManifest([IDENTITY, AugmentedView("scale_130", scale=1.25)])
    m = ViewManifest([IDENTITY, SCALE_067])
    with pytest.raises(UnknownView):
        m["hflip"]


def test_manifest_file_roundtrip(tmp_path):
    p = tmp_path / "views.csv"
    save_manifest(ViewManifest.full(), p)
    assert p.read_text().splitlines()[0] == "view_id,scale,flipped"
    assert load_manifest(p) == ViewManifest.full()


def test_manifest_file_errors(tmp_path):
    p = tmp_path / "views.csv"
    p.write_text("view_id,scale\nidentity,1.0\n")
    with pytest.raises(ParseError):
        load_manifest(p)
    p.write_text("view_id,scale,flipped\nidentity,1.0,maybe\n")
    with pytest.raises(ParseError, match="line 2"):
        load_manifest(p)
    p.write_text("view_id,scale,flipped\nhflip,1.0,true\n")
    with pytest.raises(ParseError, match="identity"):
        load_manifest(p)


def random_base_box(rng, size):
    w, h = rng.uniform(1, size / 2), rng.uniform(1, size / 2)
    x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
    return box(x, y, x + w, y + h)


@pytest.mark.parametrize("size", [600, 720])
@pytest.mark.parametrize("view", list(CANONICAL_VIEWS.values()), ids=list(CANONICAL_VIEWS))
def test_round_trip_within_half_pixel(view, size):
    rng = random.Random(size)
    meta = ImageMeta("a", size, size)
    for _ in range(200):
        b = random_base_box(rng, size)
        back = deaugment(det(forward_box(b, view, meta), view.view_id), view, meta).bbox
        assert max(abs(u - v) for u, v in zip(back.as_tuple(), b.as_tuple())) <= 0.5


# W - (W - x) is exact when x and W - x are representable, e.g. integer or 1/64-pixel coordinates
grid_coord = st.integers(0, 590 * 64).map(lambda k: k / 64)
grid_side = st.integers(32, 300 * 64).map(lambda k: k / 64)


@settings(max_examples=300)
@given(grid_coord, grid_coord, grid_side, grid_side)
def test_hflip_involution_exact(x, y, w, h):
    meta = ImageMeta("a", 600, 600)
    b = box(x, y, min(600, x + w), min(600, y + h))
    assert forward_box(forward_box(b, HFLIP, meta), HFLIP, meta) == b


@settings(max_examples=300)
@given(st.floats(0, 590), st.floats(0, 590), st.floats(0.5, 300), st.floats(0.5, 300))
def test_hflip_involution_arbitrary_floats(x, y, w, h):
    meta = ImageMeta("a", 600, 600)
    b = box(x, y, min(600, x + w), min(600, y + h))
    twice = forward_box(forward_box(b, HFLIP, meta), HFLIP, meta)
    assert twice.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-9, rel=0)


def test_views_are_immutable():
    with pytest.raises(dataclasses.FrozenInstanceError):
        IDENTITY.scale = 2.0
