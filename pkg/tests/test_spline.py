"""Spline fitting and stroke rasterization for annotation masks."""

import numpy as np
import pytest

from contourforge.postprocess import contour_points, msd, skeletonize
from contourforge.spline import SplineContour, fit_spline, marker_residuals, rasterize

FIX5 = [(8.0, 90.0), (30.0, 55.0), (64.0, 40.0), (95.0, 52.0), (120.0, 80.0)]


def random_markers(rng, n=None, extent=128, margin=6.0):
    n = n or int(rng.integers(3, 9))
    xs = np.sort(rng.uniform(margin, extent - 1 - margin, size=n))
    ys = rng.uniform(margin, extent - 1 - margin, size=n)
    return list(zip(xs.tolist(), ys.tolist()))


# ---------------------------------------------------------------------------
# fitting


def test_two_markers_give_the_straight_segment():
    c = fit_spline([(10.0, 20.0), (50.0, 40.0)], samples=11)
    assert c.degree == 1
    assert c.sample_count == 11 == len(c.polyline)
    assert tuple(c.polyline[0]) == (10.0, 20.0)
    assert tuple(c.polyline[-1]) == (50.0, 40.0)
    # parameter is chord length, so samples are evenly spaced on the line
    expect = np.linspace([10.0, 20.0], [50.0, 40.0], 11)
    assert np.allclose(c.polyline, expect, atol=1e-9)


def test_collinear_markers_stay_on_the_line():
    markers = [(0.0, 0.0), (3.0, 1.5), (6.0, 3.0), (10.0, 5.0)]
    c = fit_spline(markers, samples=200)
    x, y = c.polyline[:, 0], c.polyline[:, 1]
    assert np.abs(y - 0.5 * x).max() < 1e-9


def test_three_markers_use_degree_two():
    c = fit_spline([(0.0, 0.0), (5.0, 8.0), (10.0, 0.0)], samples=50)
    assert c.degree == 2


def test_five_marker_interpolation_residuals():
    # the curve must pass through every marker
    res = marker_residuals(FIX5)
    assert res.shape == (5,)
    assert res.max() < 1e-6


def test_endpoints_are_exact():
    c = fit_spline(FIX5, samples=77)
    assert tuple(c.polyline[0]) == FIX5[0]
    assert tuple(c.polyline[-1]) == FIX5[-1]


def test_translation_equivariance():
    rng = np.random.default_rng(4)
    markers = random_markers(rng, n=6)
    shift = np.array([3.25, -2.5])
    base = fit_spline(markers, samples=100).polyline
    moved = fit_spline([(x + 3.25, y - 2.5) for x, y in markers], samples=100).polyline
    assert np.abs(moved - (base + shift)).max() < 1e-9


def test_adaptive_sampling_meets_density_bound():
    rng = np.random.default_rng(11)
    for _ in range(20):
        markers = random_markers(rng)
        c = fit_spline(markers)
        gaps = np.linalg.norm(np.diff(c.polyline, axis=0), axis=1)
        assert gaps.max() <= 2.0
        assert c.sample_count == len(c.polyline)
        assert c.degree == min(3, len(markers) - 1)


def test_fit_rejects_bad_markers():
    with pytest.raises(ValueError, match="at least 2"):
        fit_spline([(4.0, 4.0)])
    with pytest.raises(ValueError, match="duplicate"):
        fit_spline([(4.0, 4.0), (4.0, 4.0), (9.0, 9.0)])
    with pytest.raises(ValueError, match="bounds"):
        fit_spline([(-1.0, 5.0), (9.0, 9.0)], extent=128)
    with pytest.raises(ValueError, match="bounds"):
        fit_spline([(5.0, 5.0), (9.0, 128.0)], extent=128)
    # duplicates only matter when consecutive: a closed-ish curve is fine
    fit_spline([(4.0, 4.0), (9.0, 9.0), (4.0, 4.2)])


# ---------------------------------------------------------------------------
# rasterization


def test_horizontal_thickness_one_is_a_single_row():
    c = fit_spline([(5.0, 20.0), (60.0, 20.0)])
    res = rasterize(c, 1, 64)
    expect = np.zeros((64, 64), np.uint8)
    expect[20, 5:61] = 1
    assert res.clipped is False
    assert np.array_equal(res.mask, expect)


def in_frame(poly, extent):
    """Clipping drops out-of-frame curve portions by contract, so fidelity
    bounds quantify over the points that can have pixels at all."""
    keep = (poly >= 0).all(axis=1) & (poly <= extent - 1).all(axis=1)
    return poly[keep]


def test_thickness_three_covers_every_point_within_one_px():
    rng = np.random.default_rng(7)
    for _ in range(10):
        c = fit_spline(random_markers(rng))
        res = rasterize(c, 3, 128)
        fg = np.argwhere(res.mask > 0)
        pts = in_frame(c.polyline, 128)
        for x, y in pts[:: max(1, len(pts) // 40)]:
            d = np.sqrt((fg[:, 0] - y) ** 2 + (fg[:, 1] - x) ** 2)
            assert d.min() <= 1.0


def test_rasterize_output_is_binary_uint8():
    c = fit_spline(FIX5)
    res = rasterize(c, 3, 128)
    assert res.mask.dtype == np.uint8
    assert set(np.unique(res.mask)) <= {0, 1}


def test_fully_outside_contour_clips_to_empty():
    c = fit_spline([(200.0, 200.0), (240.0, 220.0)])
    res = rasterize(c, 3, 128)
    assert res.clipped is True
    assert res.mask.sum() == 0


def test_partial_clip_flags_and_keeps_inside_part():
    c = fit_spline([(100.0, 60.0), (200.0, 60.0)])
    res = rasterize(c, 1, 128)
    assert res.clipped is True
    assert res.mask[60, 100:128].all()
    assert res.mask.sum() == 28


def test_rasterize_validates_thickness():
    c = fit_spline(FIX5)
    with pytest.raises(ValueError, match="thickness"):
        rasterize(c, 0, 128)


def test_rasterize_accepts_raw_polyline():
    poly = np.array([[5.0, 20.0], [6.0, 20.0], [7.0, 20.0]])
    res = rasterize(poly, 1, 32)
    assert res.mask[20, 5:8].all()


# ---------------------------------------------------------------------------
# end-to-end fidelity


def test_round_trip_skeleton_stays_within_one_px():
    rng = np.random.default_rng(42)
    for _ in range(50):
        markers = random_markers(rng)
        c = fit_spline(markers, extent=128)
        res = rasterize(c, 3, 128)
        skel = skeletonize(res.mask)
        got = contour_points(skel)
        pts = in_frame(c.polyline, 128)
        want_rc = np.unique(np.rint(pts[:, ::-1]).astype(int), axis=0)
        assert msd(got, want_rc) < 1.0
