"""SAT overlap vs Monte-Carlo containment, polygon and polyline checks."""

import numpy as np
import pytest

from pieplan.geometry import (
    box_corners,
    boxes_overlap,
    point_in_polygon,
    polyline_cumlength,
    project_onto_polyline,
    segment_intersects_box,
)


def test_axis_aligned_corners():
    corners = box_corners(np.array([0.0, 0.0]), np.array([4.0, 2.0]), 0.0)
    expect = {(2, 1), (2, -1), (-2, -1), (-2, 1)}
    assert {tuple(np.round(c, 9)) for c in corners} == expect


def test_disjoint_and_overlapping_boxes():
    c0, e0 = np.zeros(2), np.array([4.0, 2.0])
    assert boxes_overlap(c0, e0, 0.0, np.array([10.0, 0.0]), e0, 0.0) == False  # noqa: E712
    assert boxes_overlap(c0, e0, 0.0, np.array([1.0, 0.5]), e0, 0.3) == True  # noqa: E712


def test_rotated_near_miss():
    # diagonal box slides past the corner of an axis-aligned one
    a = boxes_overlap(np.zeros(2), np.array([2.0, 2.0]), 0.0,
                      np.array([2.4, 2.4]), np.array([2.0, 2.0]), np.pi / 4)
    assert a == False  # noqa: E712


def sample_overlap(c1, e1, h1, c2, e2, h2, rng, n=10_000):
    """Monte-Carlo containment oracle, 10^4 samples per box.

    Two convex boxes overlap iff one contains the other or their boundaries
    cross, so each box contributes half its samples from its interior and
    half spread densely along its perimeter.
    """
    for (ca, ea, ha, cb, eb, hb) in [(c1, e1, h1, c2, e2, h2), (c2, e2, h2, c1, e1, h1)]:
        area = rng.uniform(-0.5, 0.5, size=(n // 2, 2)) * ea
        t = np.linspace(0.0, 4.0, n // 2, endpoint=False)
        side = np.floor(t).astype(int)
        frac = t - side
        perim = np.empty((n // 2, 2))
        perim[side == 0] = np.stack([(frac[side == 0] - 0.5) * ea[0],
                                     np.full((side == 0).sum(), -ea[1] / 2)], axis=1)
        perim[side == 1] = np.stack([np.full((side == 1).sum(), ea[0] / 2),
                                     (frac[side == 1] - 0.5) * ea[1]], axis=1)
        perim[side == 2] = np.stack([(0.5 - frac[side == 2]) * ea[0],
                                     np.full((side == 2).sum(), ea[1] / 2)], axis=1)
        perim[side == 3] = np.stack([np.full((side == 3).sum(), -ea[0] / 2),
                                     (0.5 - frac[side == 3]) * ea[1]], axis=1)
        local = np.concatenate([area, perim])
        rot = np.array([[np.cos(ha), -np.sin(ha)], [np.sin(ha), np.cos(ha)]])
        pts = local @ rot.T + ca
        d = pts - cb
        rot_b = np.array([[np.cos(hb), np.sin(hb)], [-np.sin(hb), np.cos(hb)]])
        lb = d @ rot_b.T
        if np.any((np.abs(lb[:, 0]) <= eb[0] / 2) & (np.abs(lb[:, 1]) <= eb[1] / 2)):
            return True
    return False


def min_gap(c1, e1, h1, c2, e2, h2):
    """Smallest SAT projection gap; near zero means the pair is boundary-critical."""
    gaps = []
    corners1 = box_corners(c1, e1, h1)
    corners2 = box_corners(c2, e2, h2)
    for h in (h1, h2):
        for axis in (np.array([np.cos(h), np.sin(h)]), np.array([-np.sin(h), np.cos(h)])):
            p1, p2 = corners1 @ axis, corners2 @ axis
            gaps.append(max(p1.min() - p2.max(), p2.min() - p1.max()))
    return max(gaps)


def test_sat_agrees_with_monte_carlo_oracle():
    rng = np.random.default_rng(2913)
    checked = 0
    for _ in range(200):
        c1 = rng.uniform(-3, 3, 2)
        c2 = rng.uniform(-3, 3, 2)
        e1 = rng.uniform(0.5, 4.0, 2)
        e2 = rng.uniform(0.5, 4.0, 2)
        h1 = rng.uniform(-np.pi, np.pi)
        h2 = rng.uniform(-np.pi, np.pi)
        if abs(min_gap(c1, e1, h1, c2, e2, h2)) < 1e-3:
            continue  # skip the 1 mm boundary band
        got = bool(boxes_overlap(c1, e1, h1, c2, e2, h2))
        want = sample_overlap(c1, e1, h1, c2, e2, h2, rng)
        assert got == want, (c1, e1, h1, c2, e2, h2)
        checked += 1
    assert checked > 150


def test_boxes_overlap_broadcasts():
    centers = np.array([[10.0, 0.0], [0.5, 0.0]])
    out = boxes_overlap(np.zeros(2), np.array([4.0, 2.0]), 0.0,
                        centers, np.array([[4.0, 2.0]] * 2), np.zeros(2))
    assert out.tolist() == [False, True]


def test_point_in_polygon_square():
    square = np.array([[0, 0], [4, 0], [4, 4], [0, 4]], dtype=float)
    pts = np.array([[2, 2], [5, 2], [-0.1, 1], [3.9, 3.9]])
    assert point_in_polygon(pts, square).tolist() == [True, False, False, True]


def test_point_in_polygon_concave():
    # L-shape: the notch is outside
    poly = np.array([[0, 0], [4, 0], [4, 2], [2, 2], [2, 4], [0, 4]], dtype=float)
    assert point_in_polygon(np.array([1.0, 3.0]), poly)
    assert not point_in_polygon(np.array([3.0, 3.0]), poly)


def test_degenerate_polygon_rejected():
    with pytest.raises(ValueError, match="polygon"):
        point_in_polygon(np.zeros(2), np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_polyline_projection():
    line = np.array([[0, 0], [10, 0], [10, 10]], dtype=float)
    s, d = project_onto_polyline(np.array([[5.0, 1.0], [10.0, 5.0], [12.0, 12.0]]), line)
    assert np.allclose(s, [5.0, 15.0, 20.0])
    assert np.allclose(d, [1.0, 0.0, np.hypot(2.0, 2.0)])
    assert np.allclose(polyline_cumlength(line), [0.0, 10.0, 20.0])


def test_segment_box_intersection():
    c, e, h = np.zeros(2), np.array([4.0, 2.0]), 0.0
    assert segment_intersects_box([-5, 0], [5, 0], c, e, h)
    assert segment_intersects_box([0, -5], [0, 5], c, e, h)
    assert not segment_intersects_box([-5, 3], [5, 3], c, e, h)
    assert not segment_intersects_box([5, -5], [5, 5], c, e, h)
