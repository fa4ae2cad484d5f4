"""Marker-to-contour geometry: interpolating B-splines and stroke
rasterization.

Markers are ordered (x, y) sub-pixel coordinates; their order defines
the curve direction. The fitted curve is an interpolating B-spline with
chord-length parameterization and clamped ends, so it passes through
every marker and starts/ends exactly on the first/last one. Two or
three markers degrade the degree to n - 1 (a straight segment or a
quadratic) instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline

MAX_SAMPLE_GAP_PX = 2.0
_ADAPTIVE_CAP = 1 << 17

__all__ = ["SplineContour", "RasterResult", "fit_spline", "marker_residuals", "rasterize"]


@dataclass(frozen=True)
class SplineContour:
    """Dense polyline sampled uniformly in curve parameter."""

    polyline: np.ndarray  # (sample_count, 2) float64, columns (x, y)
    degree: int
    sample_count: int


@dataclass(frozen=True)
class RasterResult:
    mask: np.ndarray  # (extent, extent) uint8 in {0, 1}
    clipped: bool


def _checked_markers(markers, extent=None) -> np.ndarray:
    pts = np.asarray(markers, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least 2 markers of shape (x, y)")
    if not np.isfinite(pts).all():
        raise ValueError("markers must be finite")
    if extent is not None and ((pts < 0).any() or (pts > extent - 1).any()):
        raise ValueError(f"markers out of bounds for extent {extent}")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if (seg == 0).any():
        raise ValueError("duplicate consecutive markers")
    return pts


def _spline(pts: np.ndarray):
    # chord-length parameterization keeps unevenly spaced markers honest
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    t = np.concatenate(([0.0], np.cumsum(seg)))
    k = min(3, len(pts) - 1)
    return make_interp_spline(t, pts, k=k, axis=0), t, k


def fit_spline(markers, samples: int | None = None, extent: int | None = None) -> SplineContour:
    """Fit the interpolating spline and sample it uniformly in parameter.

    With ``samples`` omitted, the count adapts until consecutive polyline
    points are at most 2 px apart (the density the rasterizer relies on).
    An explicit ``samples`` is honored verbatim.
    """
    pts = _checked_markers(markers, extent)
    bspl, t, k = _spline(pts)

    def sample(n: int) -> np.ndarray:
        poly = bspl(np.linspace(t[0], t[-1], n))
        # pin the endpoints: the solve leaves ~1e-16 dust on them
        poly[0] = pts[0]
        poly[-1] = pts[-1]
        return poly

    if samples is not None:
        if samples < 2:
            raise ValueError("samples must be >= 2")
        poly = sample(int(samples))
    else:
        n = max(16, 2 * len(pts))
        poly = sample(n)
        while n < _ADAPTIVE_CAP:
            gaps = np.linalg.norm(np.diff(poly, axis=0), axis=1)
            if gaps.max() <= MAX_SAMPLE_GAP_PX:
                break
            n *= 2
            poly = sample(n)
    return SplineContour(polyline=poly, degree=k, sample_count=len(poly))


def marker_residuals(markers) -> np.ndarray:
    """Distance between each marker and the curve at its parameter.

    Verifies the interpolation system: every entry should be ~machine
    epsilon, and the service treats anything past 1e-6 px as a defect.
    """
    pts = _checked_markers(markers)
    bspl, t, _ = _spline(pts)
    return np.linalg.norm(bspl(t) - pts, axis=1)


def rasterize(contour, thickness_px: int, extent: int) -> RasterResult:
    """Draw the polyline with a round stroke into a binary mask.

    Every pixel the curve crosses is set (consecutive samples are walked
    densely, so thickness 1 yields an unbroken 1-px trace), then a disc
    of radius (thickness - 1) / 2 thickens the stroke. Points falling
    outside the frame are dropped and flagged via ``clipped``.
    """
    if thickness_px < 1:
        raise ValueError(f"thickness must be >= 1: {thickness_px}")
    poly = contour.polyline if isinstance(contour, SplineContour) else np.asarray(contour, dtype=np.float64)
    mask = np.zeros((extent, extent), dtype=np.uint8)

    # dense walk: enough substeps per segment that no crossed pixel is skipped
    pieces = [poly[:1]]
    for p, q in zip(poly[:-1], poly[1:]):
        dist = float(np.hypot(*(q - p)))
        steps = int(np.ceil(dist * 2.0)) + 1
        u = np.linspace(0.0, 1.0, steps + 1)[1:, None]
        pieces.append(p + u * (q - p))
    walk = np.concatenate(pieces)

    cols = np.rint(walk[:, 0]).astype(np.int64)
    rows = np.rint(walk[:, 1]).astype(np.int64)
    inside = (rows >= 0) & (rows < extent) & (cols >= 0) & (cols < extent)
    clipped = bool((~inside).any())
    rows, cols = rows[inside], cols[inside]

    r = (thickness_px - 1) / 2.0
    rad = int(np.floor(r))
    for dy in range(-rad, rad + 1):
        for dx in range(-rad, rad + 1):
            if dy * dy + dx * dx > r * r + 1e-9:
                continue
            rr, cc = rows + dy, cols + dx
            ok = (rr >= 0) & (rr < extent) & (cc >= 0) & (cc < extent)
            mask[rr[ok], cc[ok]] = 1
    return RasterResult(mask=mask, clipped=clipped)
