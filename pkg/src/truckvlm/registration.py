"""Rigid registration of a track's per-frame clouds and dense reconstruction.

Adjacent frames are aligned with point-to-point ICP, refined with
point-to-plane ICP, and the pairwise transforms are chained so every frame
lands in one reference frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, as_points, nearest_rotation

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


class DegenerateError(RegistrationError):
    pass


@dataclass(frozen=True, eq=False)
class Correspondences:
    source: np.ndarray
    target: np.ndarray
    sq_dist: np.ndarray

    def __len__(self):
        return len(self.source)

    @classmethod
    def identity(cls, n: int) -> Correspondences:
        idx = np.arange(n)
        return cls(idx, idx, np.zeros(n))


@dataclass(frozen=True, eq=False)
class NormalCloud:
    points: np.ndarray
    normals: np.ndarray
    # smallest / summed covariance eigenvalue of each neighborhood; 0 on a plane
    curvature: np.ndarray | None = None

    def __post_init__(self):
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals differ in shape")
        if self.curvature is not None and len(self.curvature) != len(self.points):
            raise ValueError("curvature length differs from point count")


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    rms: float
    residuals: list  # RMS after each accepted iteration, starting with the initial guess
    iterations: int
    converged: bool
    unconstrained_dofs: int = 0


def best_rigid_fit(source, target, pairs: Correspondences | None = None) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target`` (Kabsch)."""
    src = as_points(source)
    tgt = as_points(target)
    if pairs is None:
        if len(src) != len(tgt):
            raise ValueError("source and target differ in length and no pairs given")
        pairs = Correspondences.identity(len(src))
    if len(pairs) < 3:
        raise DegenerateError("degenerate correspondence set")
    a = src[pairs.source]
    b = tgt[pairs.target]
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    sv = np.linalg.svd(a0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateError("degenerate correspondence set")
    u, _, vt = np.linalg.svd(a0.T @ b0)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    r = nearest_rotation(r)
    return RigidTransform(r, cb - r @ ca)


def _match(tree: cKDTree, moved: np.ndarray, reject: float, trim: float) -> Correspondences:
    dist, idx = tree.query(moved, distance_upper_bound=reject)
    ok = np.isfinite(dist)
    src = np.flatnonzero(ok)
    if len(src) == 0:
        raise RegistrationError("no valid correspondences")
    d = dist[ok]
    tgt = idx[ok]
    if trim < 1.0:
        keep = max(1, int(np.floor(trim * len(src))))
        order = np.argsort(d, kind="stable")[:keep]
        order.sort()
        src, tgt, d = src[order], tgt[order], d[order]
    return Correspondences(src, tgt, d * d)


def icp_point_to_point(source, target, init: RigidTransform | None = None, max_iter: int = 50,
                       tol: float = 1e-5, reject: float = 1.0, trim: float = 0.9) -> IcpResult:
    """Classic ICP: nearest neighbors, trimmed, then a closed-form rigid fit.

    A step that would raise the RMS residual is rejected and ends the run, so
    the recorded residual sequence never increases.
    """
    src = as_points(source)
    tgt = as_points(target)
    if len(src) < 3 or len(tgt) < 3:
        raise DegenerateError("degenerate correspondence set")
    tree = cKDTree(tgt)
    current = init or RigidTransform.identity()
    pairs = _match(tree, current.apply(src), reject, trim)
    rms = float(np.sqrt(pairs.sq_dist.mean()))
    residuals = [rms]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = best_rigid_fit(current.apply(src), tgt, pairs)
        candidate = step @ current
        try:
            new_pairs = _match(tree, candidate.apply(src), reject, trim)
        except RegistrationError:
            break
        new_rms = float(np.sqrt(new_pairs.sq_dist.mean()))
        if new_rms > rms:
            break
        current, pairs = candidate, new_pairs
        residuals.append(new_rms)
        done = rms - new_rms < tol
        rms = new_rms
        if done:
            converged = True
            break
    return IcpResult(current, rms, residuals, it, converged)


def estimate_normals(cloud, k: int = 12) -> NormalCloud:
    """PCA normals from each point's k-neighborhood, flipped to face the sensor."""
    pts = as_points(cloud)
    if k < 3 or len(pts) < k:
        raise ValueError(f"need at least k={k} >= 3 points, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]  # (n, k, 3)
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, -pts) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    total = vals.sum(axis=1)
    curvature = np.divide(vals[:, 0], total, out=np.zeros(len(pts)), where=total > 0)
    return NormalCloud(pts, normals, curvature)


def _plane_rms(moved, target: NormalCloud, pairs: Correspondences) -> float:
    r = np.einsum("ni,ni->n", target.normals[pairs.target], moved[pairs.source] - target.points[pairs.target])
    return float(np.sqrt(np.mean(r * r)))


def _match_plane(tree: cKDTree, plane: NormalCloud, moved: np.ndarray, reject: float,
                 trim: float, usable: np.ndarray | None = None) -> Correspondences:
    """Nearest neighbors within ``reject``, trimmed by point-to-plane residual.

    Pairs whose target is not ``usable`` (non-planar neighborhood) are dropped
    after matching, so a source point never snaps to a farther planar point.
    """
    pairs = _match(tree, moved, reject, 1.0)
    if usable is not None:
        ok = usable[pairs.target]
        if not ok.any():
            raise RegistrationError("no valid correspondences")
        pairs = Correspondences(pairs.source[ok], pairs.target[ok], pairs.sq_dist[ok])
    if trim < 1.0:
        r = np.abs(np.einsum("ni,ni->n", plane.normals[pairs.target],
                             moved[pairs.source] - plane.points[pairs.target]))
        keep = max(1, int(np.floor(trim * len(r))))
        order = np.sort(np.argsort(r, kind="stable")[:keep])
        pairs = Correspondences(pairs.source[order], pairs.target[order], pairs.sq_dist[order])
    return pairs


def _small_rotation(w) -> np.ndarray:
    a, b, g = w
    skew = np.array([[0.0, -g, b], [g, 0.0, -a], [-b, a, 0.0]])
    return nearest_rotation(np.eye(3) + skew)


def _scaled_step(x, scale: float) -> RigidTransform:
    return RigidTransform(_small_rotation(scale * x[:3]), scale * x[3:])


def icp_point_to_plane(source, target: NormalCloud, init: RigidTransform | None = None,
                       max_iter: int = 50, tol: float = 1e-5, reject: float = 1.0,
                       trim: float = 0.9, strict: bool = True, rcond: float = 1e-8,
                       max_curvature: float | None = 0.05, backtrack: int = 4) -> IcpResult:
    """Point-to-plane ICP with a small-angle linearization per iteration.

    Each step solves ``min sum (n_i . (R s_i + t - q_i))^2`` for
    ``(alpha, beta, gamma, tx, ty, tz)``. When the 6x6 normal equations are
    rank deficient, ``strict`` raises; otherwise the step is restricted to the
    constrained subspace and the number of free directions is reported.

    Correspondences landing on target points whose neighborhood is not planar
    (curvature above ``max_curvature``, e.g. on box edges) are left out. A step that raises the
    residual is halved up to ``backtrack`` times before the run stops.
    """
    src = as_points(source)
    if len(src) < 6:
        raise DegenerateError("unconstrained degrees of freedom")
    tgt_pts, tgt_normals = target.points, target.normals
    usable = None
    if max_curvature is not None and target.curvature is not None:
        flat = target.curvature <= max_curvature
        if flat.sum() >= 6:
            usable = flat
    plane = NormalCloud(tgt_pts, tgt_normals)
    tree = cKDTree(tgt_pts)
    current = init or RigidTransform.identity()
    moved = current.apply(src)
    pairs = _match_plane(tree, plane, moved, reject, trim, usable)
    rms = _plane_rms(moved, plane, pairs)
    residuals = [rms]
    converged = False
    free_dofs = 0
    it = 0
    for it in range(1, max_iter + 1):
        if len(pairs) < 6:
            raise DegenerateError("unconstrained degrees of freedom")
        p = moved[pairs.source]
        q = tgt_pts[pairs.target]
        n = tgt_normals[pairs.target]
        jac = np.hstack([np.cross(p, n), n])
        res = np.einsum("ni,ni->n", n, p - q)
        ata = jac.T @ jac
        atb = -jac.T @ res
        evals, evecs = np.linalg.eigh(ata)
        good = evals > rcond * max(evals[-1], 1e-300)
        free_dofs = int(6 - good.sum())
        if free_dofs and strict:
            raise DegenerateError("unconstrained degrees of freedom")
        x = evecs[:, good] @ ((evecs[:, good].T @ atb) / evals[good])
        accepted = None
        scale = 1.0
        for _ in range(backtrack + 1):
            candidate = _scaled_step(x, scale) @ current
            cand_moved = candidate.apply(src)
            try:
                new_pairs = _match_plane(tree, plane, cand_moved, reject, trim, usable)
            except RegistrationError:
                new_pairs = None
            if new_pairs is not None:
                new_rms = _plane_rms(cand_moved, plane, new_pairs)
                if new_rms <= rms:
                    accepted = (candidate, cand_moved, new_pairs, new_rms)
                    break
            scale *= 0.5
        if accepted is None:
            break
        current, moved, pairs, new_rms = accepted
        residuals.append(new_rms)
        done = rms - new_rms < tol
        rms = new_rms
        if done:
            converged = True
            break
    return IcpResult(current, rms, residuals, it, converged, free_dofs)


@dataclass(frozen=True)
class RegistrationParams:
    max_iter: int = 50
    tol: float = 1e-5
    reject: float = 1.0
    trim: float = 0.9
    normal_k: int = 12


@dataclass(frozen=True, eq=False)
class PairRecord:
    source_frame: int
    target_frame: int
    point_rms: float
    plane_rms: float | None
    refined: bool
    ok: bool
    message: str = ""


def register_pair(source, target, params: RegistrationParams = RegistrationParams(),
                  init: RigidTransform | None = None) -> tuple[RigidTransform, PairRecord]:
    """Point-to-point ICP then point-to-plane refinement; returns source->target.

    ``init`` defaults to the translation between the two centroids. If the
    refinement cannot run (too few points, degenerate geometry) the
    point-to-point result is kept.
    """
    src = as_points(source)
    tgt = as_points(target)
    if init is None:
        init = RigidTransform(np.eye(3), tgt.mean(axis=0) - src.mean(axis=0))
    p2p = icp_point_to_point(src, tgt, init, params.max_iter, params.tol, params.reject, params.trim)
    try:
        normals = estimate_normals(tgt, min(params.normal_k, len(tgt)))
        p2l = icp_point_to_plane(src, normals, p2p.transform, params.max_iter, params.tol,
                                 params.reject, params.trim, strict=False)
    except (RegistrationError, ValueError) as exc:
        logger.debug("point-to-plane refinement skipped: %s", exc)
        return p2p.transform, PairRecord(-1, -1, p2p.rms, None, False, True, str(exc))
    return p2l.transform, PairRecord(-1, -1, p2p.rms, p2l.rms, True, True)


@dataclass(frozen=True, eq=False)
class ReconstructedCloud:
    points: np.ndarray
    frame_ids: np.ndarray  # source frame (position in the input list) per point
    reference_index: int
    transforms: dict  # frame -> RigidTransform into the reference frame
    pairs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def save(self, path, meta_path=None) -> None:
        """ASCII ``x y z frameIdx`` lines plus a JSON metadata sidecar."""
        lines = [f"{x:.6f} {y:.6f} {z:.6f} {int(f)}" for (x, y, z), f in zip(self.points, self.frame_ids)]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
        meta_path = meta_path or Path(str(path) + ".meta.json")
        meta = {
            "reference_index": self.reference_index,
            "n_points": int(len(self.points)),
            "skipped_frames": list(self.skipped),
            "pairs": [
                {"source": p.source_frame, "target": p.target_frame,
                 "point_to_point_rms": round(p.point_rms, 9) if p.point_rms is not None else None,
                 "point_to_plane_rms": round(p.plane_rms, 9) if p.plane_rms is not None else None,
                 "refined": p.refined, "ok": p.ok, "message": p.message}
                for p in self.pairs
            ],
        }
        Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return data[:, :3], data[:, 3].astype(np.int64)


def voxel_thin(points, frame_ids, voxel: float):
    """Keep the first point of every occupied voxel."""
    keys = np.floor(as_points(points) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return points[first], frame_ids[first]


def reconstruct_track(clouds, reference_index: int | None = None,
                      params: RegistrationParams = RegistrationParams(),
                      voxel: float | None = None) -> ReconstructedCloud:
    """Merge a track's per-frame clouds into the reference frame's coordinates.

    Frame ``i + 1`` is registered onto the last successfully registered frame
    before it; a failed pair drops that frame (logged and recorded) instead of
    aborting. The reference defaults to the frame with the most points.
    """
    clouds = [as_points(c) for c in clouds]
    if not clouds:
        raise ValueError("reconstruct_track needs at least one frame")
    if reference_index is None:
        reference_index = int(np.argmax([len(c) for c in clouds]))
    if not 0 <= reference_index < len(clouds):
        raise ValueError("reference index out of range")

    # to_first[i]: frame i -> frame 0 (or whatever frame 0 chains to)
    to_first = {0: RigidTransform.identity()}
    pairs, skipped = [], []
    anchor = 0
    for i in range(1, len(clouds)):
        try:
            t, rec = register_pair(clouds[i], clouds[anchor], params)
        except (RegistrationError, ValueError) as exc:
            logger.warning("frame %d: registration onto frame %d failed (%s); skipped", i, anchor, exc)
            pairs.append(PairRecord(i, anchor, float("nan"), None, False, False, str(exc)))
            skipped.append(i)
            continue
        pairs.append(PairRecord(i, anchor, rec.point_rms, rec.plane_rms, rec.refined, True, rec.message))
        to_first[i] = to_first[anchor] @ t
        anchor = i

    if reference_index not in to_first:
        # reference itself was dropped: fall back to the densest surviving frame
        reference_index = max(to_first, key=lambda i: (len(clouds[i]), -i))
    back = to_first[reference_index].inverse()
    transforms = {i: back @ t for i, t in to_first.items()}

    pts, ids = [], []
    for i in sorted(transforms):
        pts.append(transforms[i].apply(clouds[i]))
        ids.append(np.full(len(clouds[i]), i, dtype=np.int64))
    points = np.vstack(pts)
    frame_ids = np.concatenate(ids)
    if voxel:
        points, frame_ids = voxel_thin(points, frame_ids, voxel)
    return ReconstructedCloud(points, frame_ids, reference_index, transforms, pairs, skipped)
