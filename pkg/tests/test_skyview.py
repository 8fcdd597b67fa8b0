import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canyonnav import skyview
from canyonnav.errors import DataError
from canyonnav.gnss import ElevationAzimuth, SkyLabel
from canyonnav.skyview import FisheyeModel, SkyMask

MODEL = FisheyeModel(cx=512.0, cy=512.0, radius=500.0)


# --- projection -----------------------------------------------------------------

def test_zenith_maps_to_principal_point():
    for az in [0.0, 1.0, 4.0]:
        u, v = skyview.project_satellite(ElevationAzimuth(math.pi / 2, az), 0.3, MODEL)
        assert (u, v) == (512.0, 512.0)


def test_rim_north():
    # r = 500, alpha = 0: straight up in the image
    u, v = skyview.project_satellite(ElevationAzimuth(0.0, 0.0), 0.0, MODEL)
    assert u == pytest.approx(512.0, abs=1e-9)
    assert v == pytest.approx(12.0, abs=1e-9)


def test_rim_east():
    u, v = skyview.project_satellite(ElevationAzimuth(0.0, math.pi / 2), 0.0, MODEL)
    assert u == pytest.approx(1012.0, abs=1e-9)
    assert v == pytest.approx(512.0, abs=1e-9)


def test_radius_strictly_decreasing_in_elevation():
    eles = np.linspace(0.0, math.pi / 2, 50)
    rs = []
    for e in eles:
        u, v = skyview.project_satellite(ElevationAzimuth(e, 0.7), 0.0, MODEL)
        rs.append(math.hypot(u - MODEL.cx, MODEL.cy - v))
    assert all(b < a for a, b in zip(rs, rs[1:]))
    assert rs[0] == pytest.approx(MODEL.radius, abs=1e-12)


@given(ele=st.floats(1e-6, math.pi / 2 - 1e-6), az=st.floats(0.0, 2 * math.pi - 1e-9),
       yaw=st.floats(-10.0, 10.0))
@settings(max_examples=300, deadline=None)
def test_projection_inverse(ele, az, yaw):
    u, v = skyview.project_satellite(ElevationAzimuth(ele, az), yaw, MODEL)
    back = skyview.unproject_pixel(u, v, yaw, MODEL)
    assert abs(back.elevation - ele) < 1e-9
    diff = (back.azimuth - az + math.pi) % (2 * math.pi) - math.pi
    assert abs(diff) < 1e-9


# --- classification -------------------------------------------------------------

def sats_at(*pairs):
    return [(f"G{i:02d}", ElevationAzimuth(e, a)) for i, (e, a) in enumerate(pairs, 1)]


def test_all_sky_mask():
    mask = SkyMask(np.ones((1024, 1024), dtype=bool))
    projs, fallback = skyview.classify_epoch(
        mask, sats_at((0.1, 0.0), (1.0, 2.0), (0.4, 4.4)), 0.0, MODEL)
    assert not fallback
    assert all(p.label == SkyLabel.LOS for p in projs)


def test_all_masked():
    mask = SkyMask(np.zeros((1024, 1024), dtype=bool))
    projs, _ = skyview.classify_epoch(mask, sats_at((0.1, 0.0), (1.2, 2.0)), 0.0, MODEL)
    assert all(p.label == SkyLabel.NLOS for p in projs)


def test_half_sky_mask():
    # sky only above the horizontal centreline (v < cy): projection evaluation
    # puts (ele=pi/4, az=0) in the top half and az=pi in the bottom half
    raster = np.zeros((1024, 1024), dtype=bool)
    raster[:512, :] = True
    mask = SkyMask(raster)
    projs, _ = skyview.classify_epoch(
        mask, sats_at((math.pi / 4, 0.0), (math.pi / 4, math.pi)), 0.0, MODEL)
    assert projs[0].label == SkyLabel.LOS
    assert projs[1].label == SkyLabel.NLOS


def test_no_mask_fallback():
    projs, fallback = skyview.classify_epoch(None, sats_at((0.5, 1.0)), 0.0, MODEL)
    assert fallback
    assert projs[0].label == SkyLabel.LOS


def test_out_of_image():
    # rim disk extends past the image edge for an off-centre principal point
    model = FisheyeModel(cx=100.0, cy=512.0, radius=500.0)
    mask = SkyMask(np.ones((1024, 1024), dtype=bool))
    projs, _ = skyview.classify_epoch(
        mask, [("G01", ElevationAzimuth(0.01, 3 * math.pi / 2))], 0.0, model)
    assert projs[0].label == SkyLabel.OUT_OF_IMAGE


@given(k=st.integers(-3, 3), m=st.integers(-3, 3))
@settings(max_examples=40, deadline=None)
def test_wraparound_invariance(k, m):
    raster = np.zeros((1024, 1024), dtype=bool)
    raster[:400, 300:] = True
    mask = SkyMask(raster)
    sats = sats_at((0.3, 1.1), (0.9, 5.5), (1.4, 3.0))
    base, _ = skyview.classify_epoch(mask, sats, 0.7, MODEL)
    shifted_sats = [(sid, ElevationAzimuth(ea.elevation, ea.azimuth + 2 * math.pi * k))
                    for sid, ea in sats]
    shifted, _ = skyview.classify_epoch(mask, shifted_sats, 0.7 + 2 * math.pi * m, MODEL)
    assert [p.label for p in base] == [p.label for p in shifted]


# --- segmentation baselines ------------------------------------------------------

def bimodal_image(rng=None, lo=10, hi=200, shape=(128, 128)):
    img = np.full(shape, lo, dtype=np.uint8)
    img[: shape[0] // 2] = hi
    return img


def test_otsu_bimodal():
    img = bimodal_image()
    mask = skyview.segment_baseline(img, "otsu")
    t = skyview.otsu_threshold(img.astype(float))
    assert 10 < t < 200
    assert mask.raster[:64].all() and not mask.raster[64:].any()


@given(lo=st.integers(0, 100), hi=st.integers(120, 255), frac=st.floats(0.1, 0.9))
@settings(max_examples=100, deadline=None)
def test_otsu_threshold_strictly_between_two_values(lo, hi, frac):
    img = np.full((64, 64), lo, dtype=float)
    img[: int(64 * frac) or 1] = hi
    t = skyview.otsu_threshold(img)
    assert lo < t < hi


def kmeans_partition_oracle(img):
    """Brute force over the two candidate 2-means partitions of a 2-valued image."""
    vals = np.unique(img)
    assert len(vals) == 2
    # candidate A: split between the values; candidate B: everything together
    cost_split = sum(((img[img == v] - img[img == v].mean()) ** 2).sum() for v in vals)
    cost_merge = ((img - img.mean()) ** 2).sum()
    assert cost_split < cost_merge
    return img == vals[1]


def test_kmeans_matches_partition_oracle():
    img = bimodal_image()
    expected = kmeans_partition_oracle(img.astype(float))
    mask = skyview.segment_baseline(img, "kmeans", rng=np.random.default_rng(0))
    np.testing.assert_array_equal(mask.raster, expected)


def test_region_growth_recovers_disk():
    # sky value 220 inside radius 0.7*R, building 40 outside
    h = w = 256
    model = FisheyeModel(cx=128.0, cy=128.0, radius=120.0)
    vv, uu = np.mgrid[0:h, 0:w]
    r = np.hypot(uu - model.cx, model.cy - vv)
    img = np.where(r <= 0.7 * model.radius, 220, 40).astype(np.uint8)
    mask = skyview.segment_baseline(img, "region_growth", seed_point=(128, 128))
    np.testing.assert_array_equal(mask.raster, r <= 0.7 * model.radius)


def test_uniform_image_policies():
    bright = np.full((64, 64), 200, dtype=np.uint8)
    dark = np.full((64, 64), 30, dtype=np.uint8)
    for method in ("otsu", "kmeans"):
        assert skyview.segment_baseline(bright, method).raster.all()
        assert not skyview.segment_baseline(dark, method).raster.any()
    assert skyview.segment_baseline(dark, "region_growth").raster.all()


def test_rgb_input():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    img[:32] = [200, 210, 190]
    img[32:] = [20, 25, 30]
    mask = skyview.segment_baseline(img, "otsu")
    assert mask.raster[:32].all() and not mask.raster[32:].any()


def test_unknown_method():
    with pytest.raises(DataError):
        skyview.segment_baseline(bimodal_image(), "watershed")


# --- accuracy metric -------------------------------------------------------------

def test_accuracy_identity_and_complement():
    truth = SkyMask(np.random.default_rng(0).random((64, 64)) > 0.5)
    assert skyview.segmentation_accuracy(truth, truth) == 1.0
    comp = SkyMask(~truth.raster)
    assert skyview.segmentation_accuracy(comp, truth) == 0.0


def test_accuracy_counts():
    truth = SkyMask(np.ones((100, 100), dtype=bool))
    pred = truth.raster.copy()
    pred[:1, :] = False  # exactly 1% of pixels
    assert skyview.segmentation_accuracy(SkyMask(pred), truth) == pytest.approx(0.99)


def test_accuracy_dimension_mismatch():
    with pytest.raises(DataError):
        skyview.segmentation_accuracy(SkyMask(np.ones((64, 64), dtype=bool)),
                                      SkyMask(np.ones((64, 65), dtype=bool)))


# --- rendering consistency --------------------------------------------------------

def test_render_mask_matches_analytic_pixels():
    def cutoff(az):
        return np.where((az > 1.0) & (az < 2.5), 0.9, 0.3)

    yaw = 0.8
    raster = skyview.render_mask(cutoff, yaw, MODEL, (1024, 1024))
    rng = np.random.default_rng(1)
    for _ in range(300):
        u = rng.uniform(30, 990)
        v = rng.uniform(30, 990)
        val = skyview.sky_pixel_at(u, v, cutoff, yaw, MODEL, (1024, 1024))
        if val is None:
            assert not raster[round(v), round(u)]
        else:
            assert raster[round(v), round(u)] == val
