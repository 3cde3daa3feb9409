import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointfuse.geometry import (
    Box3D,
    box_corners_bev,
    iou_3d,
    iou_3d_axis_aligned_diff,
    iou_3d_matrix,
    iou_bev,
    iou_bev_matrix,
    iou_bev_upper_bound,
    mc_iou_oracle,
    points_in_box,
    polygon_area,
    polygon_clip,
    project_points,
    wrap_angle,
)
from pointfuse.tensor import Tensor

coord = st.floats(-2, 2, allow_nan=False)
size = st.floats(0.3, 3, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
boxes = st.builds(Box3D, coord, coord, coord, size, size, size, angle)


def test_exact_cases():
    a = Box3D(1.0, 2.0, 3.0, 1.5, 1.6, 3.9, 0.7)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, Box3D(20.0, 2.0, 3.0, 1.5, 1.6, 3.9, 0.7)) == 0.0
    cube = Box3D(0, 0, 0, 1, 1, 1, 0)
    assert abs(iou_3d(cube, Box3D(0.5, 0, 0, 1, 1, 1, 0)) - 1 / 3) <= 1e-9
    # vertical offset of half the height on the same footprint
    assert abs(iou_3d(cube, Box3D(0, 0.5, 0, 1, 1, 1, 0)) - 1 / 3) <= 1e-9


def test_rotated_square_overlap():
    # unit square against itself rotated 45 degrees: octagon of area 2(sqrt2 - 1)
    a = Box3D(0, 0, 0, 1, 1, 1, 0)
    b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    assert iou_bev(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)


def test_polygon_helpers():
    sq = [(0, 0), (2, 0), (2, 2), (0, 2)]
    assert polygon_area(sq) == pytest.approx(4.0)
    clipped = polygon_clip(sq, [(1, 1), (3, 1), (3, 3), (1, 3)])
    assert polygon_area(clipped) == pytest.approx(1.0)


def test_corners_orientation_and_extent():
    c = box_corners_bev(Box3D(1, 0, 2, 1, 2, 4, 0.3))
    assert polygon_area(c) == pytest.approx(8.0)
    np.testing.assert_allclose(c.mean(axis=0), [1, 2])


@settings(max_examples=150, deadline=None)
@given(boxes, boxes)
def test_iou_bounds_and_symmetry(a, b):
    v = iou_3d(a, b)
    assert -1e-12 <= v <= 1 + 1e-12
    assert v == pytest.approx(iou_3d(b, a), abs=1e-9)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=5), st.lists(boxes, min_size=1, max_size=5))
def test_vectorized_matches_scalar(xs, ys):
    a = np.array([b.to_array() for b in xs])
    b = np.array([b.to_array() for b in ys])
    ref_bev = np.array([[iou_bev(p, q) for q in ys] for p in xs])
    ref_3d = np.array([[iou_3d(p, q) for q in ys] for p in xs])
    np.testing.assert_allclose(iou_bev_matrix(a, b), ref_bev, atol=1e-9)
    np.testing.assert_allclose(iou_3d_matrix(a, b), ref_3d, atol=1e-9)
    assert np.all(iou_bev_upper_bound(a, b) >= ref_bev - 1e-9)


@settings(max_examples=40, deadline=None)
@given(boxes, st.floats(-10, 10), st.floats(-10, 10))
def test_translation_invariance(a, dx, dz):
    b = Box3D(a.x + 0.3, a.y, a.z - 0.2, a.h, a.w * 1.1, a.l, a.yaw + 0.4)
    shift = lambda q: Box3D(q.x + dx, q.y, q.z + dz, q.h, q.w, q.l, q.yaw)
    assert iou_3d(shift(a), shift(b)) == pytest.approx(iou_3d(a, b), abs=1e-9)


def test_monte_carlo_agrees_on_rotated_pair():
    a = Box3D(0, 0, 0, 1.5, 1.7, 4.0, 0.3)
    b = Box3D(0.8, 0.2, 0.5, 1.4, 1.6, 3.8, -0.5)
    mc, se = mc_iou_oracle(a, b, 400_000, seed=3)
    assert abs(mc - iou_3d(a, b)) <= max(3 * se, 1e-2)


def test_projection_fixture():
    M = np.array([[2.0, 0, 1, 0], [0, 2.0, 1, 0], [0, 0, 1, 0]])
    uv, valid = project_points(np.array([[1.0, 2.0, 4.0], [0, 0, -1.0]]), M)
    np.testing.assert_array_equal(uv[0], [(2 + 4) / 4, (4 + 4) / 4])
    assert valid.tolist() == [True, False]


def test_points_in_box_respects_yaw():
    b = Box3D(0, 1.0, 0, 1.0, 1.0, 4.0, math.pi / 2)
    # with a quarter turn the long axis lies along z
    pts = np.array([[0, 0.5, 1.8], [1.8, 0.5, 0], [0, 1.5, 0]])
    assert points_in_box(pts, b).tolist() == [True, False, False]


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 101)
    w = wrap_angle(x)
    assert np.all((w >= -math.pi) & (w < math.pi))
    np.testing.assert_allclose(np.sin(w), np.sin(x), atol=1e-12)


def test_axis_aligned_surrogate_matches_exact_without_yaw():
    gt = np.array([[0.0, 1.0, 5.0, 1.5, 1.6, 3.8, 0.0]])
    center = Tensor(np.array([[0.3, 1.1, 5.2]]), requires_grad=True)
    size = Tensor(np.array([[1.4, 1.7, 4.0]]), requires_grad=True)
    v = iou_3d_axis_aligned_diff(center, size, gt)
    exact = iou_3d(Box3D(0.3, 1.1, 5.2, 1.4, 1.7, 4.0, 0.0), Box3D.from_array(gt[0]))
    assert v.data[0] == pytest.approx(exact, abs=1e-12)
    v.sum().backward()
    assert np.all(np.isfinite(center.grad)) and np.abs(center.grad).sum() > 0


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0.0, 1, 1)
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(wrap_angle(3 * math.pi))
