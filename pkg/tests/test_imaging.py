import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgx import imaging as im
from kgx.errors import (
    InvalidChannelCount,
    InvalidChannelIndex,
    InvalidParameter,
    NoBrightRegion,
    ShapeMismatch,
)
from kgx.imaging import Box
from kgx.synth import PALETTE, SceneSpec, generate_sample

from oracles import brute_morph, flood_fill_labels, global_equalize, otsu_sweep, raster_iou, region_stats

masks32 = arrays(np.bool_, (12, 12))


def rgb(r, g, b, shape=(4, 4)):
    img = np.zeros(shape + (3,), dtype=np.uint8)
    img[...] = (r, g, b)
    return img


# ------------------------------------------------------------ channels

def test_grayscale_values():
    assert im.to_grayscale(rgb(255, 255, 255))[0, 0] == 255
    assert im.to_grayscale(rgb(0, 0, 0))[0, 0] == 0
    assert im.to_grayscale(rgb(100, 150, 200))[0, 0] == 141


def test_grayscale_rejects_single_channel():
    with pytest.raises(InvalidChannelCount):
        im.to_grayscale(np.zeros((4, 4), dtype=np.uint8))


def test_extract_channel():
    assert im.extract_channel(rgb(10, 20, 30), 1)[0, 0] == 20
    g = np.arange(16, dtype=np.uint8).reshape(4, 4)
    assert np.array_equal(im.extract_channel(np.dstack([g, g, g]), 0), g)
    with pytest.raises(InvalidChannelIndex):
        im.extract_channel(rgb(1, 2, 3), 3)


def test_extract_channel_reads_palette_blue():
    s = generate_sample(SceneSpec(seed=5, width=128, height=128, exudates=1, vessel_curves=0, noise_sigma=0))
    ex = s.lesions[0]
    ys, xs = np.nonzero(ex.mask)
    blue = im.extract_channel(s.image, 2)[ys[len(ys) // 2], xs[len(xs) // 2]]
    assert blue == PALETTE["exudate"][2]


def test_raster_validation():
    with pytest.raises(InvalidChannelCount):
        im.as_raster(np.zeros((3, 3, 2)))
    with pytest.raises(InvalidParameter):
        im.as_raster(np.full((2, 2), 300))


# ------------------------------------------------------------ CLAHE

def test_clahe_constant_image():
    out = im.clahe(np.full((40, 50), 90, dtype=np.uint8), 2.0, (4, 4))
    assert out.shape == (40, 50)
    assert len(np.unique(out)) == 1


@pytest.mark.parametrize("seed", range(5))
def test_clahe_global_limit_matches_equalisation(seed):
    img = np.random.default_rng(seed).integers(0, 256, (37, 53), dtype=np.uint8)
    assert np.array_equal(im.clahe(img, 1e6, (1, 1)), global_equalize(img))


def test_clahe_rejects_low_clip():
    with pytest.raises(InvalidParameter):
        im.clahe(np.zeros((8, 8), dtype=np.uint8), 0.5)
    with pytest.raises(InvalidParameter):
        im.clahe(np.zeros((8, 8), dtype=np.uint8), 2.0, (9, 1))


def test_clahe_tile_luts_monotone():
    rng = np.random.default_rng(1)
    for _ in range(10):
        img = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        luts = im.clahe_tile_luts(img, float(rng.uniform(1, 6)), (4, 4)).astype(int)
        assert np.all(np.diff(luts, axis=-1) >= 0)


def _clahe_reference(img, clip, tiles):
    """Per-pixel evaluation of the interpolation rule, for the blockwise implementation."""
    luts = im.clahe_tile_luts(img, clip, tiles).astype(np.float64)
    h, w = img.shape
    nx, ny = tiles
    xe = (np.arange(nx + 1) * w) // nx
    ye = (np.arange(ny + 1) * h) // ny
    cx = (xe[:-1] + xe[1:] - 1) / 2.0
    cy = (ye[:-1] + ye[1:] - 1) / 2.0

    def locate(c, v):
        i0 = max(0, min(int(np.searchsorted(c, v, side="right")) - 1, len(c) - 1))
        i1 = min(i0 + 1, len(c) - 1)
        t = 0.0 if c[i1] == c[i0] else min(max((v - c[i0]) / (c[i1] - c[i0]), 0.0), 1.0)
        return i0, i1, t

    out = np.zeros_like(img)
    for y in range(h):
        j0, j1, ty = locate(cy, y)
        for x in range(w):
            i0, i1, tx = locate(cx, x)
            a = img[y, x]
            top = (1 - tx) * luts[j0, i0, a] + tx * luts[j0, i1, a]
            bot = (1 - tx) * luts[j1, i0, a] + tx * luts[j1, i1, a]
            out[y, x] = min(255, max(0, math.floor((1 - ty) * top + ty * bot + 0.5)))
    return out


@pytest.mark.parametrize("shape,tiles", [((30, 41), (3, 4)), ((64, 64), (8, 8)), ((17, 9), (2, 1))])
def test_clahe_matches_pixelwise_reference(shape, tiles):
    img = np.random.default_rng(sum(shape)).integers(0, 256, shape, dtype=np.uint8)
    assert np.array_equal(im.clahe(img, 2.5, tiles), _clahe_reference(img, 2.5, tiles))


# ------------------------------------------------------------ thresholds

def test_otsu_bimodal():
    img = np.array([10] * 50 + [200] * 50, dtype=np.uint8).reshape(10, 10)
    t = im.otsu_threshold(img)
    assert 10 <= t <= 199
    assert t == otsu_sweep(img)
    assert np.array_equal(im.threshold(img, t), img == 200)


def test_otsu_constant_image():
    img = np.full((5, 5), 77, dtype=np.uint8)
    assert im.otsu_threshold(img) == 77
    assert not im.threshold(img, 77).any()


def test_otsu_quarter_split():
    img = np.array([0] * 25 + [255] * 75, dtype=np.uint8).reshape(10, 10)
    t = im.otsu_threshold(img)
    assert t == otsu_sweep(img)
    assert np.array_equal(im.threshold(img, t), img == 255)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (6, 7)))
def test_otsu_matches_sweep(img):
    expected = otsu_sweep(img)
    got = im.otsu_threshold(img)
    assert got == (expected if expected is not None else int(img.flat[0]))


def test_threshold_polarity():
    img = np.array([[0, 128, 255]], dtype=np.uint8)
    assert not im.threshold(img, 255, "above").any()
    assert im.threshold(img, 255, "below").tolist() == [[True, True, False]]
    with pytest.raises(InvalidParameter):
        im.threshold(img, 3, "sideways")


# ------------------------------------------------------------ morphology

def test_morphology_simple_cases():
    assert not im.morphology(np.zeros((8, 8), bool), "erode").any()
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert not im.morphology(m, "open", 1).any()
    with pytest.raises(InvalidParameter):
        im.morphology(m, "erode", 0)
    with pytest.raises(InvalidParameter):
        im.morphology(m, "smudge")


def test_open_square_matches_set_definition():
    m = np.zeros((30, 30), bool)
    m[5:25, 5:25] = True
    se = im.disk(2)
    expected = brute_morph(brute_morph(m, se, "erode"), se, "dilate")
    got = im.morphology(m, "open", 2)
    assert np.array_equal(got, expected)
    # the disk cannot reach into the square's corners
    assert got.sum() == 400 - 4 * 3
    assert not (got & ~m).any()


@settings(max_examples=30, deadline=None)
@given(masks32, st.sampled_from(["erode", "dilate"]), st.integers(1, 2))
def test_morphology_matches_set_definition(m, op, r):
    assert np.array_equal(im.morphology(m, op, r), brute_morph(m, im.disk(r), op))


@settings(max_examples=30, deadline=None)
@given(masks32, st.integers(1, 2))
def test_open_close_idempotent(m, r):
    o = im.morphology(m, "open", r)
    assert np.array_equal(im.morphology(o, "open", r), o)
    c = im.morphology(m, "close", r)
    assert np.array_equal(im.morphology(c, "close", r), c)


# ------------------------------------------------------------ components

def test_components_basic():
    assert im.connected_components(np.zeros((4, 4), bool)) == []
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    (r,) = im.connected_components(m)
    assert r.area == 1 and r.bbox == Box(1, 1, 2, 2)
    m[2, 2] = True
    assert len(im.connected_components(m, 8)) == 1
    assert len(im.connected_components(m, 4)) == 2


@settings(max_examples=60, deadline=None)
@given(masks32, st.sampled_from([4, 8]))
def test_components_match_flood_fill(m, conn):
    labels, n = im.label_mask(m, conn)
    ref, ref_n = flood_fill_labels(m, conn)
    assert n == ref_n
    assert np.array_equal(labels, ref)
    regions = im.connected_components(m, conn)
    assert sum(r.area for r in regions) == m.sum()
    for r, s in zip(regions, region_stats(ref, ref_n)):
        assert r.area == s["area"]
        assert tuple(r.bbox) == s["bbox"]
        assert r.centroid == pytest.approx(s["centroid"], abs=1e-12)
        assert 0.0 <= r.circularity <= 1.0


def test_components_mean_intensity_and_circularity():
    m = np.zeros((40, 40), bool)
    m[im.disk(8).nonzero()[0] + 10, im.disk(8).nonzero()[1] + 10] = True
    m[2, 2:30] = True
    src = np.where(m, 200, 0).astype(np.uint8)
    src[2, 2:30] = 50
    line, blob = im.connected_components(m, 8, src)
    assert blob.mean_intensity == 200.0 and line.mean_intensity == 50.0
    assert blob.circularity > 0.8
    assert line.circularity < 0.2


def test_components_source_shape_checked():
    with pytest.raises(ShapeMismatch):
        im.connected_components(np.ones((3, 3), bool), 8, np.zeros((4, 4), np.uint8))


# ------------------------------------------------------------ IoU

def test_mask_iou_cases():
    a = np.zeros((20, 30), bool)
    a[0:10, 0:10] = True
    b = np.zeros((20, 30), bool)
    b[0:10, 5:15] = True
    assert im.mask_iou(a, a) == 1.0
    assert im.mask_iou(a, b) == pytest.approx(50 / 150, abs=1e-15)
    c = np.zeros((20, 30), bool)
    c[15:, 20:] = True
    assert im.mask_iou(a, c) == 0.0
    assert im.mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ShapeMismatch):
        im.mask_iou(a, np.zeros((3, 3)))


def test_box_iou_cases():
    assert im.box_iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0
    assert im.box_iou(Box(0, 0, 10, 10), Box(10, 0, 20, 10)) == 0.0
    v = im.box_iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10))
    assert v == pytest.approx(1 / 3, abs=1e-15)
    assert abs(v - raster_iou((0, 0, 10, 10), (5, 0, 15, 10))) < 1e-12


boxes = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_box_iou_properties(a, b):
    v = im.box_iou(a, b)
    assert v == im.box_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)
    assert abs(v - raster_iou(a, b)) < 1e-12


def test_greedy_match_prefers_best_pairs():
    preds = [Box(0, 0, 10, 10), Box(1, 0, 11, 10)]
    truth = [Box(1, 0, 11, 10), Box(50, 50, 60, 60)]
    assert im.greedy_match(preds, truth) == [(1, 0, 1.0)]


# ------------------------------------------------------------ optic disc

def test_brightest_region_finds_planted_disc():
    s = generate_sample(SceneSpec(seed=11, exudates=2, hemorrhages=2))
    _, (cx, cy), _ = im.brightest_region(im.to_grayscale(s.image), 0.98)
    assert math.hypot(cx - s.disc_center[0], cy - s.disc_center[1]) <= 3.0


def test_brightest_region_edge_cases():
    flat = np.full((10, 10), 40, dtype=np.uint8)
    mask, _, r = im.brightest_region(flat, 0.5)
    assert mask.all() and r == pytest.approx(math.sqrt(100 / math.pi))
    img = np.arange(100, dtype=np.uint8).reshape(10, 10)
    mask, _, _ = im.brightest_region(img, 1e-9)
    assert mask.sum() >= 99
    with pytest.raises(InvalidParameter):
        im.brightest_region(img, 1.0)


def test_no_bright_region_error_exists():
    assert issubclass(NoBrightRegion, Exception)


def test_exclude_disk():
    m = np.ones((21, 21), bool)
    out = im.exclude_disk(m, (10, 10), 3.0, 1.0)
    assert not out[10, 10]
    assert out[10, 14] and not out[10, 13]
    wide = im.exclude_disk(m, (10, 10), 3.0, 2.0)
    assert wide[10, 17] and not wide[10, 16]
    with pytest.raises(InvalidParameter):
        im.exclude_disk(m, (1, 1), 0.0)


def test_exclude_disk_drops_disc_detections():
    s = generate_sample(SceneSpec(seed=2, exudates=3))
    gray = im.extract_channel(s.image, 1)
    bright = im.threshold(gray, 170)
    _, c, r = im.brightest_region(gray, 0.98)
    kept = im.exclude_disk(bright, c, r, 1.3)
    for reg in im.connected_components(kept):
        assert math.hypot(reg.centroid[0] - s.disc_center[0], reg.centroid[1] - s.disc_center[1]) > s.disc_radius


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (12, 9, 3), dtype=np.uint8)
    im.write_png(tmp_path / "a.png", img)
    assert np.array_equal(im.read_png(tmp_path / "a.png"), img)
    m = img[..., 0] > 128
    im.write_mask_png(tmp_path / "m.png", m)
    assert np.array_equal(im.read_mask_png(tmp_path / "m.png"), m)


def test_pure_functions_repeat():
    img = np.random.default_rng(3).integers(0, 256, (50, 50), dtype=np.uint8)
    assert np.array_equal(im.clahe(img, 3.0), im.clahe(img.copy(), 3.0))
