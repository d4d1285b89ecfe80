"""Geometric primitives shared by every pipeline stage.

Points are ``(N, 3)`` float arrays in a sensor-centered, z-up frame (ground
sits near z = -2 m for a sensor mounted 2 m above the road).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Frame:
    """One LiDAR sweep."""

    timestamp: float
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("frame contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Build from an axis-angle vector (radians) and a translation."""
        return cls(rotation_from_rotvec(rotvec), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))

    def allclose(self, other: RigidTransform, atol=1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def rotation_from_rotvec(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def nearest_rotation(m) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    r = nearest_rotation(a.rotation @ b.rotation)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def centroid(points) -> np.ndarray:
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("empty point set")
    return pts.mean(axis=0)


@dataclass(frozen=True, eq=False)
class OrientedBox2D:
    """Ground-plane rectangle.

    ``half_extents[0]`` lies along ``heading`` and is the longer side, so for
    vehicles the heading is the body axis.
    """

    center: np.ndarray
    half_extents: np.ndarray
    heading: float

    @property
    def area(self) -> float:
        return float(4.0 * self.half_extents[0] * self.half_extents[1])

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        u = np.array([c, s]) * self.half_extents[0]
        v = np.array([-s, c]) * self.half_extents[1]
        return np.array([self.center + u + v, self.center - u + v, self.center - u - v, self.center + u - v])


def convex_hull_2d(xy: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise.

    Collinear inputs collapse to their two extreme points.
    """
    pts = np.unique(np.asarray(xy, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    if len(pts) > 64:
        pts = pts[~_inside_extreme_octagon(pts)]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    seq = pts.tolist()
    lower = half(seq)
    upper = half(seq[::-1])
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=np.float64)


def _inside_extreme_octagon(pts: np.ndarray) -> np.ndarray:
    """Points strictly inside the polygon spanned by the 8 directional extremes.

    Such points can never be hull vertices, so dropping them is exact.
    """
    keys = [pts[:, 0], pts[:, 1], pts[:, 0] + pts[:, 1], pts[:, 0] - pts[:, 1]]
    ext = []
    for k in keys:
        ext.append(int(np.argmin(k)))
        ext.append(int(np.argmax(k)))
    poly = np.unique(pts[ext], axis=0)
    if len(poly) < 3:
        return np.zeros(len(pts), dtype=bool)
    c = poly.mean(axis=0)
    order = np.argsort(np.arctan2(poly[:, 1] - c[1], poly[:, 0] - c[0]))
    poly = poly[order]
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross > 0
    return inside


def _normalize_heading(theta: float) -> float:
    """Wrap into [-pi/2, pi/2)."""
    theta = (theta + math.pi / 2) % math.pi - math.pi / 2
    if theta >= math.pi / 2:
        theta -= math.pi
    return theta


def min_oriented_bbox2d(points) -> OrientedBox2D:
    """Minimum-area enclosing rectangle of the (x, y) projection.

    Rotating calipers over the convex hull: the optimal rectangle has a side
    collinear with some hull edge, so only hull-edge angles are tried. Area
    ties go to the smallest edge angle in [0, pi/2).
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("empty point set")
    hull = convex_hull_2d(pts[:, :2])
    if len(hull) == 1:
        return OrientedBox2D(hull[0].copy(), np.zeros(2), 0.0)

    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2)
    # fold values a hair below pi/2 onto 0
    angles[np.isclose(angles, math.pi / 2, atol=1e-12)] = 0.0
    angles = np.unique(angles)

    best = None
    for theta in angles:
        c, s = math.cos(theta), math.sin(theta)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0] - 1e-12 * max(1.0, best[0]):
            best = (area, theta, u.min(), u.max(), v.min(), v.max())

    _, theta, u0, u1, v0, v1 = best
    c, s = math.cos(theta), math.sin(theta)
    mid_u, mid_v = (u0 + u1) / 2, (v0 + v1) / 2
    center = np.array([c * mid_u - s * mid_v, s * mid_u + c * mid_v])
    half_u, half_v = (u1 - u0) / 2, (v1 - v0) / 2
    heading = theta
    if half_v > half_u:
        half_u, half_v = half_v, half_u
        heading = theta + math.pi / 2
    return OrientedBox2D(center, np.array([half_u, half_v]), _normalize_heading(heading))
