"""Synthetic roadside scenes with ground truth.

Vehicles are boxes moving at constant velocity on the ground plane, sampled
on their visible surfaces (no ray casting, so no occlusion) with Gaussian
noise. The static scene is a ground plane plus a distant cylindrical wall,
sampled once per sector cell per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform
from .io import write_frame
from .prompting import ClassLabel

SENSOR_HEIGHT = 2.0

# (length, width, height) in meters; side-view aspects are spread so that a
# length/height rule can tell the classes apart.
CLASS_ARCHETYPES = {
    ClassLabel.BOBTAIL: (6.4, 2.5, 4.0),
    ClassLabel.ENCLOSED_VAN_SU: (9.6, 2.5, 4.0),
    ClassLabel.PICKUP_UTILITY_SERVICE: (6.0, 2.0, 2.0),
    ClassLabel.PASSENGER_VEHICLE: (4.6, 1.8, 1.35),
    ClassLabel.PLATFORM_SU: (8.6, 2.5, 2.2),
    ClassLabel.DUMP_TANK_SEMI: (15.8, 2.6, 3.6),
    ClassLabel.CONTAINER: (19.6, 2.6, 4.0),
    ClassLabel.ENCLOSED_VAN_SEMI: (22.0, 2.6, 4.0),
    ClassLabel.AUTO_TRANSPORTER: (23.2, 2.6, 3.8),
    ClassLabel.TANK_TANK: (22.0, 2.6, 3.2),
    ClassLabel.LOW_BOY_PLATFORM: (20.0, 2.6, 2.5),
    ClassLabel.PLATFORM_SEMI: (20.2, 2.6, 2.2),
}


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: int
    label: ClassLabel
    start: tuple  # ground-plane center at frame 0
    velocity: tuple  # m/s
    dims: tuple | None = None  # defaults to the class archetype
    clearance: float = 0.5

    @property
    def size(self) -> tuple:
        return self.dims or CLASS_ARCHETYPES[self.label]

    @property
    def heading(self) -> float:
        vx, vy = self.velocity
        return math.atan2(vy, vx) if (vx or vy) else 0.0

    def pose(self, t: float) -> RigidTransform:
        """Body frame -> sensor frame at time ``t``."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        x = self.start[0] + self.velocity[0] * t
        y = self.start[1] + self.velocity[1] * t
        return RigidTransform(rot, [x, y, -SENSOR_HEIGHT + self.clearance])


@dataclass(frozen=True)
class SyntheticScene:
    vehicles: tuple
    n_frames: int = 30
    dt: float = 0.1
    noise: float = 0.0
    points_per_m2: float = 4.0
    min_points: int = 60
    resample: bool = False  # fresh surface samples every frame
    background: bool = True
    background_frames: int = 10
    wall_radius: float = 45.0
    max_range: float = 40.0  # vehicles are only visible inside this radius
    azimuth_rays: int = 1800
    elevation_rays: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 15.0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.n_frames < 1 or self.dt <= 0:
            raise ValueError("need n_frames >= 1 and dt > 0")


def sample_box_surface(dims, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted samples on the four sides and the roof, body frame.

    Body frame: x forward, y left, z up from the box bottom.
    """
    length, width, height = dims
    faces = [
        (length * height, "side+"), (length * height, "side-"),
        (width * height, "front"), (width * height, "back"), (length * width, "top"),
    ]
    area = np.array([a for a, _ in faces])
    counts = rng.multinomial(n, area / area.sum())
    out = []
    for (_, name), m in zip(faces, counts):
        u, v = rng.random(m), rng.random(m)
        if name.startswith("side"):
            y = np.full(m, width / 2 if name == "side+" else -width / 2)
            pts = np.column_stack([(u - 0.5) * length, y, v * height])
        elif name in ("front", "back"):
            x = np.full(m, length / 2 if name == "front" else -length / 2)
            pts = np.column_stack([x, (u - 0.5) * width, v * height])
        else:
            pts = np.column_stack([(u - 0.5) * length, (v - 0.5) * width, np.full(m, height)])
        out.append(pts)
    return np.vstack(out)


def vehicle_point_count(scene: SyntheticScene, dims) -> int:
    length, width, height = dims
    area = 2 * length * height + 2 * width * height + length * width
    return max(scene.min_points, int(round(scene.points_per_m2 * area)))


def background_points(scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    """One ray per (azimuth, elevation) cell hitting ground or wall.

    Elevations sit at the channel centers (fixed per laser); azimuths are
    jittered within their bin.
    """
    na, ne = scene.azimuth_rays, scene.elevation_rays
    az = (np.arange(na)[:, None] + rng.random((na, ne))) * (2 * math.pi / na)
    span = scene.elevation_max_deg - scene.elevation_min_deg
    el_deg = scene.elevation_min_deg + (np.arange(ne)[None, :] + 0.5) * (span / ne)
    el = np.radians(np.broadcast_to(el_deg, (na, ne)))
    wall = scene.wall_radius / np.cos(el)
    with np.errstate(divide="ignore"):
        ground = np.where(el < 0, SENSOR_HEIGHT / np.tan(-el), np.inf)
    r = np.minimum(wall, ground).ravel()
    az, el = az.ravel(), el.ravel()
    pts = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    return pts


@dataclass
class SceneData:
    frames: list  # (timestamp, (N, 3) array)
    memberships: list  # per-frame (N,) vehicle id, -1 for background
    background: list  # background-only (timestamp, points)
    transforms: dict = field(default_factory=dict)  # (vehicle, k) -> frame k -> k+1 motion


def generate(scene: SyntheticScene, seed: int = 0) -> SceneData:
    """Render every frame of ``scene``; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    templates = {}
    for v in scene.vehicles:
        d = v.size
        start_r = math.hypot(*v.start)
        end_t = (scene.n_frames - 1) * scene.dt
        end_r = math.hypot(v.start[0] + v.velocity[0] * end_t, v.start[1] + v.velocity[1] * end_t)
        if min(start_r, end_r) > scene.max_range and _closest_approach(v, end_t) > scene.max_range:
            raise ValueError(f"vehicle {v.vehicle_id} never enters sensor range")
        templates[v.vehicle_id] = sample_box_surface(d, vehicle_point_count(scene, d), rng)

    frames, members, transforms = [], [], {}
    for k in range(scene.n_frames):
        t = k * scene.dt
        chunks, ids = [], []
        if scene.background:
            bg = background_points(scene, rng)
            chunks.append(bg)
            ids.append(np.full(len(bg), -1, dtype=np.int64))
        for v in scene.vehicles:
            pose = v.pose(t)
            if math.hypot(*pose.translation[:2]) > scene.max_range:
                continue
            body = templates[v.vehicle_id]
            if scene.resample:
                body = sample_box_surface(v.size, len(body), rng)
            pts = pose.apply(body)
            chunks.append(pts)
            ids.append(np.full(len(pts), v.vehicle_id, dtype=np.int64))
            if k + 1 < scene.n_frames:
                transforms[(v.vehicle_id, k)] = v.pose(t + scene.dt) @ pose.inverse()
        pts = np.vstack(chunks) if chunks else np.zeros((0, 3))
        idv = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        if scene.noise > 0 and len(pts):
            pts = _range_noise(pts, scene.noise, rng)
        frames.append((t, pts))
        members.append(idv)

    background = []
    for k in range(scene.background_frames):
        t = -(scene.background_frames - k) * scene.dt
        pts = background_points(scene, rng) if scene.background else np.zeros((0, 3))
        if scene.noise > 0 and len(pts):
            pts = _range_noise(pts, scene.noise, rng)
        background.append((t, pts))
    return SceneData(frames, members, background, transforms)


def _closest_approach(v: VehicleSpec, end_t: float) -> float:
    p = np.array(v.start, dtype=float)
    d = np.array(v.velocity, dtype=float)
    dd = float(d @ d)
    if dd == 0:
        return float(np.linalg.norm(p))
    t = min(max(-float(p @ d) / dd, 0.0), end_t)
    return float(np.linalg.norm(p + d * t))


def _range_noise(pts, sigma, rng):
    r = np.linalg.norm(pts, axis=1, keepdims=True)
    r = np.where(r == 0, 1.0, r)
    return pts + (pts / r) * rng.normal(0.0, sigma, size=(len(pts), 1))


def write_scene(scene: SyntheticScene, data: SceneData, out_dir) -> Path:
    """Frames, background frames, memberships, labels, and true transforms."""
    out = Path(out_dir)
    for sub in ("frames", "background", "truth/memberships"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k, (t, pts) in enumerate(data.frames):
        write_frame(out / "frames" / f"frame_{k:05d}.txt", pts, t)
        np.savetxt(out / "truth" / "memberships" / f"frame_{k:05d}.txt", data.memberships[k], fmt="%d")
    for k, (t, pts) in enumerate(data.background):
        write_frame(out / "background" / f"bg_{k:05d}.txt", pts, t)
    lines = ["vehicle_id,label,length,width,height,start_x,start_y,vx,vy"]
    for v in scene.vehicles:
        length, width, height = v.size
        lines.append(f"{v.vehicle_id},{v.label.value},{length},{width},{height},"
                     f"{v.start[0]},{v.start[1]},{v.velocity[0]},{v.velocity[1]}")
    (out / "truth" / "vehicles.csv").write_text("\n".join(lines) + "\n")
    tl = ["# vehicle_id frame r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz  (frame k -> k+1)"]
    for (vid, k), tr in sorted(data.transforms.items()):
        vals = list(tr.rotation.ravel()) + list(tr.translation)
        tl.append(f"{vid} {k} " + " ".join(f"{x:.9f}" for x in vals))
    (out / "truth" / "transforms.txt").write_text("\n".join(tl) + "\n")
    return out


def read_vehicle_labels(truth_dir) -> dict[int, ClassLabel]:
    out = {}
    for line in (Path(truth_dir) / "vehicles.csv").read_text().splitlines()[1:]:
        if line.strip():
            parts = line.split(",")
            out[int(parts[0])] = ClassLabel.parse(parts[1])
    return out


def read_memberships(truth_dir) -> list[np.ndarray]:
    files = sorted((Path(truth_dir) / "memberships").glob("*.txt"))
    return [np.atleast_1d(np.loadtxt(f, dtype=np.int64, ndmin=1)) for f in files]


# --- presets -----------------------------------------------------------------

def crossing_scene(noise: float = 0.02, **kw) -> SyntheticScene:
    """Two vehicles in adjacent opposing lanes passing each other mid-sequence."""
    vehicles = (
        VehicleSpec(0, ClassLabel.ENCLOSED_VAN_SU, (-22.0, 7.0), (15.0, 0.0)),
        VehicleSpec(1, ClassLabel.BOBTAIL, (22.0, 11.5), (-15.0, 0.0)),
    )
    kw.setdefault("n_frames", 30)
    return SyntheticScene(vehicles, noise=noise, **kw)


def three_class_scene(noise: float = 0.01, **kw) -> SyntheticScene:
    """Six vehicles, two each of three well-separated classes, one lane each."""
    classes = [ClassLabel.PASSENGER_VEHICLE, ClassLabel.BOBTAIL, ClassLabel.ENCLOSED_VAN_SEMI]
    lanes = [7.5, 12.0, 16.5, -7.5, -12.0, -16.5]
    vehicles = []
    for i, y in enumerate(lanes):
        direction = 1.0 if y > 0 else -1.0
        vehicles.append(VehicleSpec(i, classes[i % 3], (-14.0 * direction, y), (10.0 * direction, 0.0)))
    kw.setdefault("n_frames", 25)
    kw.setdefault("points_per_m2", 16.0)
    kw.setdefault("resample", True)
    return SyntheticScene(tuple(vehicles), noise=noise, **kw)


def twelve_class_scene(noise: float = 0.01, **kw) -> SyntheticScene:
    """One vehicle per class: six lanes, two vehicles per lane in sequence."""
    lanes = [7.5, 12.0, 16.5, -7.5, -12.0, -16.5]
    vehicles = []
    for i, label in enumerate(ClassLabel):
        y = lanes[i % 6]
        direction = 1.0 if y > 0 else -1.0
        x0 = -10.0 if i < 6 else -50.0
        vehicles.append(VehicleSpec(i, label, (x0 * direction, y), (20.0 * direction, 0.0)))
    kw.setdefault("n_frames", 30)
    kw.setdefault("max_range", 36.0)
    kw.setdefault("points_per_m2", 16.0)
    kw.setdefault("resample", True)
    return SyntheticScene(tuple(vehicles), noise=noise, **kw)


PRESETS = {
    "crossing": crossing_scene,
    "three-class": three_class_scene,
    "twelve-class": twelve_class_scene,
}
