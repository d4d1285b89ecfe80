"""Static-scene model over azimuth x elevation sector cells.

The sensor's field of view is cut into annular sector cells. Each cell keeps
a low percentile of the ranges seen while learning; a point is foreground
when it is clearly closer than its cell's background range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Frame, as_points

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SectorGrid:
    """Azimuth x elevation binning.

    The elevation span defaults to the VLP-32c vertical field of view; points
    outside it are clamped into the first/last elevation bin.
    """

    azimuth_bins: int = 1800
    elevation_bins: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 15.0

    def __post_init__(self):
        if self.azimuth_bins < 1 or self.elevation_bins < 1:
            raise ValueError("bin counts must be >= 1")
        if not self.elevation_max_deg > self.elevation_min_deg:
            raise ValueError("elevation_max_deg must exceed elevation_min_deg")

    @property
    def azimuth_width(self) -> float:
        return TWO_PI / self.azimuth_bins

    @property
    def n_cells(self) -> int:
        return self.azimuth_bins * self.elevation_bins

    def cell_indices(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :func:`cell_index`; rows at the origin raise."""
        pts = as_points(points)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        horiz = np.hypot(x, y)
        if np.any((horiz == 0) & (z == 0)):
            raise ValueError("undefined direction")
        az = np.mod(np.arctan2(y, x), TWO_PI)
        az_bin = np.floor(az / self.azimuth_width).astype(np.int64)
        # mod can round up to exactly 2*pi
        az_bin = np.minimum(az_bin, self.azimuth_bins - 1)
        elev = np.degrees(np.arctan2(z, horiz))
        span = self.elevation_max_deg - self.elevation_min_deg
        el_bin = np.floor((elev - self.elevation_min_deg) / span * self.elevation_bins).astype(np.int64)
        el_bin = np.clip(el_bin, 0, self.elevation_bins - 1)
        return az_bin, el_bin


def cell_index(p, grid: SectorGrid) -> tuple[int, int]:
    """(azimuth bin, elevation bin) of a single point."""
    az, el = grid.cell_indices(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return int(az[0]), int(el[0])


@dataclass(frozen=True, eq=False)
class BackgroundModel:
    grid: SectorGrid
    ranges: np.ndarray = field(repr=False)  # (azimuth_bins, elevation_bins), NaN = never occupied
    percentile: float
    frame_count: int
    min_observations: int = 3

    def __post_init__(self):
        r = np.array(self.ranges, dtype=np.float64)
        if r.shape != (self.grid.azimuth_bins, self.grid.elevation_bins):
            raise ValueError("range table does not match grid")
        r.setflags(write=False)
        object.__setattr__(self, "ranges", r)

    @property
    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.ranges)

    def save(self, path) -> None:
        """Write ``key value`` header lines then ``az el range`` per occupied cell."""
        g = self.grid
        lines = [
            "# truckvlm background model v1",
            f"azimuth_bins {g.azimuth_bins}",
            f"elevation_bins {g.elevation_bins}",
            f"elevation_min_deg {float(g.elevation_min_deg)!r}",
            f"elevation_max_deg {float(g.elevation_max_deg)!r}",
            f"percentile {float(self.percentile)!r}",
            f"min_observations {self.min_observations}",
            f"frame_count {self.frame_count}",
            "cells",
        ]
        az, el = np.nonzero(self.occupied)
        lines.extend(f"{a} {e} {float(self.ranges[a, e])!r}" for a, e in zip(az.tolist(), el.tolist()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> BackgroundModel:
        header = {}
        cells = []
        in_cells = False
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == "cells":
                in_cells = True
                continue
            parts = line.split()
            try:
                if in_cells:
                    cells.append((int(parts[0]), int(parts[1]), float(parts[2])))
                else:
                    header[parts[0]] = parts[1]
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed line {line!r}") from exc
        grid = SectorGrid(
            int(header["azimuth_bins"]),
            int(header["elevation_bins"]),
            float(header["elevation_min_deg"]),
            float(header["elevation_max_deg"]),
        )
        ranges = np.full((grid.azimuth_bins, grid.elevation_bins), np.nan)
        for a, e, r in cells:
            ranges[a, e] = r
        return cls(grid, ranges, float(header["percentile"]), int(header["frame_count"]),
                   int(header["min_observations"]))


def learn_background(frames, grid: SectorGrid | None = None, percentile: float = 5.0,
                     min_observations: int = 3) -> BackgroundModel:
    """Per-cell background range from a set of (mostly) static frames.

    Each cell stores the ``percentile``-th observed range, taking the next
    higher order statistic when the rank falls between samples. Cells with
    fewer than ``min_observations`` returns stay unoccupied (NaN).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("learn_background needs at least one frame")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    grid = grid or SectorGrid()
    ranges = np.full((grid.azimuth_bins, grid.elevation_bins), np.nan)

    cell_ids, obs = [], []
    for frame in frames:
        pts = frame.points if isinstance(frame, Frame) else as_points(frame)
        r = np.linalg.norm(pts, axis=1)
        keep = np.isfinite(r) & (r > 0)
        if not keep.any():
            continue
        az, el = grid.cell_indices(pts[keep])
        cell_ids.append(az * grid.elevation_bins + el)
        obs.append(r[keep])
    if cell_ids:
        cid = np.concatenate(cell_ids)
        rng = np.concatenate(obs)
        order = np.lexsort((rng, cid))
        cid, rng = cid[order], rng[order]
        uniq, start, count = np.unique(cid, return_index=True, return_counts=True)
        ok = count >= min_observations
        rank = np.ceil(percentile / 100.0 * (count - 1) - 1e-12).astype(np.int64)
        vals = rng[start + rank]
        flat = ranges.reshape(-1)
        flat[uniq[ok]] = vals[ok]
    return BackgroundModel(grid, ranges, float(percentile), len(frames), min_observations)


def foreground_mask(points, model: BackgroundModel, margin: float = 0.5) -> np.ndarray:
    """Boolean mask of foreground rows of ``points``."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    pts = as_points(points)
    mask = np.zeros(len(pts), dtype=bool)
    r = np.linalg.norm(pts, axis=1)
    valid = np.isfinite(r) & (r > 0)
    if not valid.any():
        return mask
    az, el = model.grid.cell_indices(pts[valid])
    bg = model.ranges[az, el]
    fg = np.where(np.isnan(bg), True, r[valid] < bg - margin)
    mask[np.flatnonzero(valid)[fg]] = True
    return mask


def extract_foreground(frame, model: BackgroundModel, margin: float = 0.5) -> np.ndarray:
    """Foreground points of ``frame`` in their original order."""
    pts = frame.points if isinstance(frame, Frame) else as_points(frame)
    return pts[foreground_mask(pts, model, margin)]
