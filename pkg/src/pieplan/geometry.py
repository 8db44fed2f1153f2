"""Planar geometry for scenario construction and rule-based scoring.

Oriented-box overlap uses the separating-axis test specialised to
rectangles (4 candidate axes). Functions broadcast over leading
dimensions so a whole rollout can be tested against all agents at once.
"""

from __future__ import annotations

import numpy as np


def box_corners(center: np.ndarray, extent: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Corners of oriented rectangles.

    center (..., 2), extent (..., 2) as (length, width), heading (...,).
    Returns (..., 4, 2) in order FL, FR, RR, RL.
    """
    center = np.asarray(center, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    half_l = extent[..., 0] / 2.0
    half_w = extent[..., 1] / 2.0
    c, s = np.cos(heading), np.sin(heading)
    fwd = np.stack([c, s], axis=-1)
    left = np.stack([-s, c], axis=-1)
    hl = half_l[..., None] * fwd
    hw = half_w[..., None] * left
    return np.stack([center + hl + hw, center + hl - hw,
                     center - hl - hw, center - hl + hw], axis=-2)


def boxes_overlap(c1, e1, h1, c2, e2, h2) -> np.ndarray:
    """Separating-axis overlap test for oriented rectangles, broadcasting
    over leading dims. Touching boundaries count as overlap."""
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    e1, e2 = np.asarray(e1, float), np.asarray(e2, float)
    h1, h2 = np.asarray(h1, float), np.asarray(h2, float)
    corners1 = box_corners(c1, e1, h1)  # (..., 4, 2)
    corners2 = box_corners(c2, e2, h2)
    h1b, h2b = np.broadcast_arrays(h1, h2)
    ca, sa = np.cos(h1b), np.sin(h1b)
    cb, sb = np.cos(h2b), np.sin(h2b)
    # each rectangle contributes two unique edge normals
    axes = np.stack([
        np.stack([ca, sa], axis=-1),
        np.stack([-sa, ca], axis=-1),
        np.stack([cb, sb], axis=-1),
        np.stack([-sb, cb], axis=-1),
    ], axis=-2)  # (..., 4, 2)
    proj1 = np.einsum("...kc,...ic->...ki", axes, corners1)  # (..., 4 axes, 4 corners)
    proj2 = np.einsum("...kc,...ic->...ki", axes, corners2)
    lo1, hi1 = proj1.min(axis=-1), proj1.max(axis=-1)
    lo2, hi2 = proj2.min(axis=-1), proj2.max(axis=-1)
    separated = (hi1 < lo2) | (hi2 < lo1)  # (..., 4)
    return ~separated.any(axis=-1)


def point_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray-casting containment for (..., 2) points in a simple polygon.

    Boundary points may fall either way (callers keep a margin). Polygon
    must have at least 3 vertices.
    """
    polygon = np.asarray(polygon, dtype=np.float64)
    if polygon.ndim != 2 or polygon.shape[0] < 3 or polygon.shape[1] != 2:
        raise ValueError(f"polygon must be (V>=3, 2), got {polygon.shape}")
    points = np.asarray(points, dtype=np.float64)
    px = points[..., 0][..., None]
    py = points[..., 1][..., None]
    x0, y0 = polygon[:, 0], polygon[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = crosses & (px < x_at)
    return hits.sum(axis=-1) % 2 == 1


def polygon_area(polygon: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise winding)."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polyline_cumlength(line: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_onto_polyline(points: np.ndarray, line: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arc-length coordinate and lateral distance of points w.r.t. a polyline.

    Returns (s, d): s (...,) arc length of the closest point on the line,
    d (...,) unsigned distance to it.
    """
    line = np.asarray(line, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    a = line[:-1]  # (S, 2)
    b = line[1:]
    ab = b - a
    seg_len2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
    cum = polyline_cumlength(line)

    p = points[..., None, :]  # (..., 1, 2)
    t = ((p - a) * ab).sum(axis=-1) / seg_len2  # (..., S)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    dist = np.linalg.norm(p - closest, axis=-1)  # (..., S)
    best = dist.argmin(axis=-1)
    s = cum[best] + np.take_along_axis(
        t, best[..., None], axis=-1)[..., 0] * np.sqrt(np.take(seg_len2, best))
    d = np.take_along_axis(dist, best[..., None], axis=-1)[..., 0]
    return s, d


def segment_intersects_box(p0: np.ndarray, p1: np.ndarray,
                           center, extent, heading) -> bool:
    """True when segment p0-p1 touches an oriented rectangle (SAT with the
    segment treated as a degenerate box)."""
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    corners = box_corners(np.asarray(center, float), np.asarray(extent, float),
                          float(heading))
    c, s = np.cos(float(heading)), np.sin(float(heading))
    d = p1 - p0
    norm = np.hypot(d[0], d[1])
    seg_axes = [np.array([-d[1], d[0]]) / norm] if norm > 1e-12 else []
    axes = [np.array([c, s]), np.array([-s, c])] + seg_axes
    seg_pts = np.stack([p0, p1])
    for axis in axes:
        pr_box = corners @ axis
        pr_seg = seg_pts @ axis
        if pr_box.max() < pr_seg.min() or pr_seg.max() < pr_box.min():
            return False
    return True
