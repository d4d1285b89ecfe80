import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_min_rect_area, rotation_about
from truckvlm.geometry import (
    Frame, RigidTransform, apply_transform, centroid, compose, convex_hull_2d, min_oriented_bbox2d,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
angles = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def transforms(draw):
    axis = draw(arrays(np.float64, 3, elements=st.floats(-1, 1)))
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    angle = draw(angles)
    t = draw(arrays(np.float64, 3, elements=finite))
    return RigidTransform(rotation_about(axis, angle), t)


def rect_points(w, h, theta, center=(0.0, 0.0)):
    c, s = math.cos(theta), math.sin(theta)
    corners = np.array([[w / 2, h / 2], [-w / 2, h / 2], [-w / 2, -h / 2], [w / 2, -h / 2]])
    rot = np.array([[c, -s], [s, c]])
    xy = corners @ rot.T + np.asarray(center)
    return np.column_stack([xy, np.zeros(4)])


def heading_mod(theta, period):
    r = theta % period
    return min(r, period - r)


# --- apply / compose ----------------------------------------------------------

def test_identity_apply():
    assert np.allclose(apply_transform(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])


def test_quarter_turn_about_z():
    t = RigidTransform.from_rotvec([0, 0, math.pi / 2])
    assert np.allclose(t.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_rejects_non_orthonormal_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_compose_identity_and_inverse():
    ident = RigidTransform.identity()
    assert compose(ident, ident).allclose(ident)
    t = RigidTransform.from_rotvec([0.1, -0.3, 0.7], [1, 2, 3])
    assert compose(t, t.inverse()).allclose(ident, atol=1e-9)


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(7)
    a = RigidTransform(rotation_about(rng.normal(size=3), 1.1), rng.normal(size=3))
    b = RigidTransform(rotation_about(rng.normal(size=3), -0.4), rng.normal(size=3))
    pts = rng.uniform(-10, 10, size=(100, 3))
    assert np.allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)


@given(transforms(), arrays(np.float64, (5, 3), elements=finite))
def test_inverse_round_trip(t, pts):
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-9)


@given(transforms(), arrays(np.float64, (6, 3), elements=finite))
def test_isometry(t, pts):
    moved = t.apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
    assert np.allclose(d0, d1, atol=1e-9)


# --- centroid -----------------------------------------------------------------

def test_centroid_examples():
    assert np.allclose(centroid([[0, 0, 0], [2, 0, 0]]), [1, 0, 0])
    assert np.allclose(centroid([[3, -1, 2]]), [3, -1, 2])
    with pytest.raises(ValueError, match="empty point set"):
        centroid(np.zeros((0, 3)))


def test_centroid_matches_independent_sum():
    rng = np.random.default_rng(1)
    pts = rng.uniform([-4, -1, 0], [4, 1, 3], size=(1000, 3))
    ref = [math.fsum(pts[:, i]) / len(pts) for i in range(3)]
    assert np.allclose(centroid(pts), ref, atol=1e-12, rtol=0)


# --- oriented box -------------------------------------------------------------

def test_single_point_box():
    box = min_oriented_bbox2d([[3, 4, 1.5]])
    assert np.allclose(box.center, [3, 4])
    assert np.allclose(box.half_extents, [0, 0])


def test_empty_box_errors():
    with pytest.raises(ValueError, match="empty point set"):
        min_oriented_bbox2d(np.zeros((0, 3)))


def test_unit_square():
    box = min_oriented_bbox2d(rect_points(1, 1, 0.0, (0.5, 0.5)))
    assert box.area == pytest.approx(brute_min_rect_area(rect_points(1, 1, 0.0)[:, :2]))
    assert box.area == pytest.approx(1.0)
    assert heading_mod(box.heading, math.pi / 2) == pytest.approx(0.0, abs=1e-9)


def test_rotated_square():
    theta = math.radians(30)
    box = min_oriented_bbox2d(rect_points(1, 1, theta))
    assert box.area == pytest.approx(1.0, abs=1e-6)
    assert heading_mod(box.heading - theta, math.pi / 2) == pytest.approx(0.0, abs=1e-9)


def test_collinear_points_zero_width():
    pts = np.column_stack([np.linspace(0, 3, 7), np.linspace(0, 4, 7), np.zeros(7)])
    box = min_oriented_bbox2d(pts)
    assert box.area == pytest.approx(0.0, abs=1e-12)
    assert box.half_extents[0] == pytest.approx(2.5)
    assert math.tan(box.heading) == pytest.approx(4 / 3)


def test_heading_range_and_long_axis():
    rng = np.random.default_rng(3)
    for _ in range(50):
        box = min_oriented_bbox2d(rng.normal(size=(30, 3)) * [5, 1, 1])
        assert -math.pi / 2 <= box.heading < math.pi / 2
        assert box.half_extents[0] >= box.half_extents[1]


@given(arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.floats(-20, 20)))
def test_box_area_matches_brute_force(pts):
    box = min_oriented_bbox2d(pts)
    ref = brute_min_rect_area(pts[:, :2])
    assert box.area == pytest.approx(ref, rel=1e-9, abs=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.floats(-20, 20)))
def test_box_contains_points_and_beats_axis_aligned(pts):
    box = min_oriented_bbox2d(pts)
    u = box.axis
    v = np.array([-u[1], u[0]])
    rel = pts[:, :2] - box.center
    tol = 1e-7 * (1 + np.abs(pts).max())
    assert np.all(np.abs(rel @ u) <= box.half_extents[0] + tol)
    assert np.all(np.abs(rel @ v) <= box.half_extents[1] + tol)
    span = pts[:, :2].max(0) - pts[:, :2].min(0)
    assert box.area <= span[0] * span[1] + 1e-9 * (1 + span.prod())


@given(st.floats(0, 2 * math.pi), st.integers(0, 10_000))
def test_rotating_input_rotates_heading(theta, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(20, 3)) * [4, 1, 1]
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    a = min_oriented_bbox2d(pts)
    b = min_oriented_bbox2d(pts @ rot.T)
    assert b.area == pytest.approx(a.area, rel=1e-9)
    assert heading_mod(b.heading - a.heading - theta, math.pi / 2) < 1e-6


def test_hull_of_square_with_interior_points():
    rng = np.random.default_rng(0)
    inner = rng.uniform(0.1, 0.9, size=(200, 2))
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    hull = convex_hull_2d(np.vstack([inner, corners]))
    assert sorted(map(tuple, hull)) == sorted(map(tuple, corners))


def test_frame_rejects_bad_points():
    with pytest.raises(ValueError):
        Frame(0.0, np.array([[0.0, np.nan, 1.0]]))
    assert len(Frame(0.5, np.zeros((4, 3)))) == 4
