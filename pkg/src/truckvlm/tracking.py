"""Object grouping and cross-frame association.

DBSCAN turns each frame's foreground into vehicle clusters; a SORT-style
tracker (constant-velocity Kalman filter + Hungarian assignment) links the
clusters over time using the centroid of each cluster's minimum oriented box.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import OrientedBox2D, as_points, min_oriented_bbox2d


@dataclass(frozen=True, eq=False)
class Cluster:
    indices: np.ndarray  # rows of the source foreground array
    centroid: np.ndarray
    box: OrientedBox2D

    @classmethod
    def from_points(cls, points, indices) -> Cluster:
        idx = np.asarray(indices, dtype=np.int64)
        sub = as_points(points)[idx]
        return cls(idx, sub.mean(axis=0), min_oriented_bbox2d(sub))

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class DBSCANResult:
    labels: np.ndarray  # -1 for noise
    clusters: list
    noise: np.ndarray


def _radius_graph(pts: np.ndarray, eps: float):
    """CSR adjacency of the ``eps``-ball graph, self loops included, rows sorted."""
    n = len(pts)
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    self_idx = np.arange(n, dtype=np.int64)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], self_idx])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], self_idx])
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, np.ascontiguousarray(cols[order], dtype=np.int64)


def dbscan(points, eps: float = 1.2, min_pts: int = 5) -> DBSCANResult:
    """Density-based clustering with 3D Euclidean distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are numbered by their first core point in input
    order, and a border point belongs to the first cluster that reaches it.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        return DBSCANResult(np.zeros(0, dtype=np.int64), [], np.zeros(0, dtype=np.int64))
    indptr, indices = _radius_graph(pts, eps)
    core = (np.diff(indptr) >= min_pts).astype(np.uint8)
    labels = kernels.dbscan_expand(indptr, indices, core)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(labels.max() + 2))
    clusters = [Cluster.from_points(pts, order[bounds[c]:bounds[c + 1]]) for c in range(labels.max() + 1)]
    return DBSCANResult(labels, clusters, np.flatnonzero(labels == -1))


# --- Kalman filter -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KalmanState:
    """Ground-plane constant-velocity state ``(cx, cy, vx, vy)``."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def initial(cls, position, velocity_var: float = 100.0, position_var: float = 0.04) -> KalmanState:
        mean = np.array([position[0], position[1], 0.0, 0.0])
        return cls(mean, np.diag([position_var, position_var, velocity_var, velocity_var]))

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[2:]


_H = np.hstack([np.eye(2), np.zeros((2, 2))])


def kalman_predict(s: KalmanState, dt: float, q_pos: float = 0.01, q_vel: float = 1.0) -> KalmanState:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    q = np.diag([q_pos, q_pos, q_vel, q_vel])
    cov = f @ s.cov @ f.T + q
    return KalmanState(f @ s.mean, 0.5 * (cov + cov.T))


def kalman_update(s: KalmanState, z, r: float = 0.04) -> KalmanState:
    """Correct with a measured box centroid (``H = [I2 | 0]``).

    Uses the Joseph form so the covariance stays symmetric PSD.
    """
    if np.isinf(r):
        return s
    z = np.asarray(z, dtype=np.float64).reshape(2)
    p = s.cov
    innov = z - _H @ s.mean
    S = _H @ p @ _H.T + r * np.eye(2)
    k = np.linalg.solve(S, _H @ p).T  # P H^T S^-1, S symmetric
    ikh = np.eye(4) - k @ _H
    cov = ikh @ p @ ikh.T + r * (k @ k.T)
    return KalmanState(s.mean + k @ innov, 0.5 * (cov + cov.T))


# --- assignment --------------------------------------------------------------

def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of ``min(m, n)`` (row, col) pairs, sorted by row."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError("cost must be a non-empty 2D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    col_of_row = kernels.hungarian(c)
    return [(int(i), int(j)) for i, j in enumerate(col_of_row) if j >= 0]


# --- SORT --------------------------------------------------------------------

class TrackStatus(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass
class Track:
    id: int
    state: KalmanState
    history: list = field(default_factory=list)  # (frame index, Cluster)
    hits: int = 1
    age: int = 0  # frames since last update
    status: TrackStatus = TrackStatus.TENTATIVE
    confirmed: bool = False

    @property
    def alive(self) -> bool:
        return self.status is not TrackStatus.DEAD

    @property
    def frame_indices(self) -> list[int]:
        return [f for f, _ in self.history]


@dataclass
class SortTracker:
    """Predict / associate / update loop over per-frame clusters."""

    gate: float = 4.0
    max_age: int = 3
    min_hits: int = 3
    q_pos: float = 0.01
    q_vel: float = 1.0
    r: float = 0.04
    velocity_var: float = 100.0
    tracks: list = field(default_factory=list)
    _next_id: int = 0

    def step(self, clusters, frame_index: int, dt: float) -> list[Track]:
        live = [t for t in self.tracks if t.alive]
        for t in live:
            t.state = kalman_predict(t.state, dt, self.q_pos, self.q_vel)
            t.age += 1

        matched_tracks, matched_clusters = set(), set()
        if live and clusters:
            pred = np.array([t.state.position for t in live])
            meas = np.array([c.box.center for c in clusters])
            dist = np.linalg.norm(pred[:, None, :] - meas[None, :, :], axis=2)
            # gated entries get a cost no feasible matching can prefer
            big = self.gate * (len(live) + len(clusters) + 1) + 1.0
            cost = np.where(dist <= self.gate, dist, big)
            for i, j in hungarian(cost):
                if dist[i, j] > self.gate:
                    continue
                t = live[i]
                t.state = kalman_update(t.state, clusters[j].box.center, self.r)
                t.history.append((frame_index, clusters[j]))
                t.hits += 1
                t.age = 0
                matched_tracks.add(i)
                matched_clusters.add(j)

        for t in live:
            if t.hits >= self.min_hits and t.status is TrackStatus.TENTATIVE:
                t.status = TrackStatus.CONFIRMED
                t.confirmed = True
            if t.age > self.max_age:
                t.status = TrackStatus.DEAD

        for j, c in enumerate(clusters):
            if j in matched_clusters:
                continue
            state = KalmanState.initial(c.box.center, self.velocity_var, self.r)
            t = Track(self._next_id, state, [(frame_index, c)])
            if self.min_hits <= 1:
                t.status, t.confirmed = TrackStatus.CONFIRMED, True
            self._next_id += 1
            self.tracks.append(t)
        return self.tracks

    def confirmed_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.confirmed]


def track_step(tracker: SortTracker, clusters, frame_index: int, dt: float) -> list[Track]:
    return tracker.step(clusters, frame_index, dt)


def track_frames(foregrounds, timestamps, eps=1.2, min_pts=5, **tracker_kw):
    """Cluster and track a whole sequence; returns ``(tracker, per-frame DBSCAN results)``."""
    tracker = SortTracker(**tracker_kw)
    results = []
    prev_t = None
    for k, (pts, ts) in enumerate(zip(foregrounds, timestamps)):
        res = dbscan(pts, eps, min_pts)
        results.append(res)
        dt = 0.1 if prev_t is None else max(ts - prev_t, 1e-6)
        tracker.step(res.clusters, k, dt)
        prev_t = ts
    return tracker, results


# --- persistence -------------------------------------------------------------

def write_track_dump(tracks, path, members_path=None) -> None:
    """One line per (track, frame) with box centroid, box, point count, status.

    ``members_path`` optionally receives the foreground row indices of every
    record, which the reconstruction stage needs.
    """
    lines = ["# track_id frame_idx cx cy half_len half_wid heading n_points status confirmed"]
    members = ["# track_id frame_idx indices..."]
    for t in sorted(tracks, key=lambda t: t.id):
        for f, c in t.history:
            b = c.box
            lines.append(
                f"{t.id} {f} {b.center[0]:.6f} {b.center[1]:.6f} {b.half_extents[0]:.6f} "
                f"{b.half_extents[1]:.6f} {b.heading:.6f} {c.size} {t.status.value} {int(t.confirmed)}"
            )
            members.append(f"{t.id} {f} " + " ".join(map(str, c.indices.tolist())))
    Path(path).write_text("\n".join(lines) + "\n")
    if members_path is not None:
        Path(members_path).write_text("\n".join(members) + "\n")


def read_track_members(path) -> dict[int, list[tuple[int, np.ndarray]]]:
    out: dict[int, list] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        out.setdefault(int(parts[0]), []).append((int(parts[1]), np.array(parts[2:], dtype=np.int64)))
    return out


def read_track_dump(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        p = line.split()
        rows.append({
            "track_id": int(p[0]), "frame": int(p[1]), "cx": float(p[2]), "cy": float(p[3]),
            "half_len": float(p[4]), "half_wid": float(p[5]), "heading": float(p[6]),
            "n_points": int(p[7]), "status": p[8], "confirmed": p[9] == "1",
        })
    return rows


__all__ = [
    "Cluster", "DBSCANResult", "KalmanState", "SortTracker", "Track", "TrackStatus",
    "dbscan", "hungarian", "kalman_predict", "kalman_update", "read_track_dump",
    "read_track_members", "track_frames", "track_step", "write_track_dump",
]
