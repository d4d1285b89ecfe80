"""From a dense 3D cloud to a cleaned binary raster.

Statistical outlier removal on the cloud, orthographic projection to an
occupancy image, then morphological opening on the image.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import as_points


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit grayscale image; row 0 is the top (largest vertical coordinate)."""

    pixels: np.ndarray = field(repr=False)
    scale: float = 0.05  # meters per pixel
    origin: tuple = (0.0, 0.0)  # world (u, v) of pixel (0, 0)'s corner

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be 2D with width, height >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def lit(self) -> np.ndarray:
        return self.pixels != 0

    def with_pixels(self, pixels) -> RasterImage:
        return RasterImage(pixels, self.scale, self.origin)

    def fingerprint(self) -> str:
        """Stable content hash (shape + pixel bytes)."""
        h = hashlib.sha256()
        h.update(f"{self.height}x{self.width}:".encode())
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()

    def to_pgm(self) -> bytes:
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + np.ascontiguousarray(self.pixels).tobytes()

    def to_png(self) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(self.pixels)).save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix.lower() == ".png":
            path.write_bytes(self.to_png())
        else:
            path.write_bytes(self.to_pgm())


def read_pgm(path, scale: float = 0.05) -> RasterImage:
    """Read a binary (P5) PGM with maxval <= 255."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    px = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return RasterImage(px.copy(), scale)


@dataclass(frozen=True, eq=False)
class StructuringElement:
    mask: np.ndarray

    def __post_init__(self):
        m = (np.asarray(self.mask) != 0).astype(np.uint8)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2 == 0:
            raise ValueError("structuring element must be a square of odd side")
        if not m.any():
            raise ValueError("structuring element has no active cell")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @classmethod
    def square(cls, side: int = 3) -> StructuringElement:
        return cls(np.ones((side, side), dtype=np.uint8))

    def reflected(self) -> StructuringElement:
        return StructuringElement(self.mask[::-1, ::-1])


def mean_knn_distances(cloud, k: int) -> np.ndarray:
    pts = as_points(cloud)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    # column 0 is the point itself (distance 0)
    return dist[:, 1:].mean(axis=1)


def outlier_mask(cloud, k: int = 16, std_ratio: float = 2.0) -> np.ndarray:
    """True for points kept by statistical outlier removal."""
    pts = as_points(cloud)
    if k < 1:
        raise ValueError("k must be >= 1")
    if std_ratio <= 0:
        raise ValueError("std_ratio must be > 0")
    if len(pts) <= k:
        raise ValueError(f"cloud has {len(pts)} points; need more than k={k}")
    d = mean_knn_distances(pts, k)
    return d <= d.mean() + std_ratio * d.std()


def statistical_outlier_removal(cloud, k: int = 16, std_ratio: float = 2.0) -> np.ndarray:
    pts = as_points(cloud)
    return pts[outlier_mask(pts, k, std_ratio)]


def project_to_image(cloud, view: str = "side", scale: float = 0.05, padding: int = 10,
                     travel_axis=None) -> RasterImage:
    """Orthographic occupancy projection.

    ``side`` maps (coordinate along ``travel_axis``, z) to (col, row) and
    ``top`` maps (x, y). Rows grow downward from the largest vertical
    coordinate. A pixel is 255 when at least one point lands in it.
    """
    pts = as_points(cloud)
    if len(pts) == 0:
        raise ValueError("cannot project an empty cloud")
    if not scale > 0:
        raise ValueError("scale must be > 0")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if view == "side":
        axis = np.array([1.0, 0.0]) if travel_axis is None else np.asarray(travel_axis, dtype=np.float64)[:2]
        axis = axis / np.linalg.norm(axis)
        u = pts[:, :2] @ axis
        v = pts[:, 2]
    elif view == "top":
        u, v = pts[:, 0], pts[:, 1]
    else:
        raise ValueError(f"unknown view {view!r}")
    # tiny slack keeps exact multiples of the scale on their own pixel
    cols = np.floor((u - u.min()) / scale + 1e-9).astype(np.int64) + padding
    rows = np.floor((v.max() - v) / scale + 1e-9).astype(np.int64) + padding
    width = int(cols.max()) + 1 + padding
    height = int(rows.max()) + 1 + padding
    px = np.zeros((height, width), dtype=np.uint8)
    px[rows, cols] = 255
    origin = (float(u.min() - padding * scale), float(v.max() + padding * scale))
    return RasterImage(px, scale, origin)


def _binary(img: RasterImage) -> np.ndarray:
    px = img.pixels
    if not np.all((px == 0) | (px == 255)):
        raise ValueError("morphology needs a binary (0/255) image")
    return np.ascontiguousarray(px)


def erode(img: RasterImage, se: StructuringElement | None = None) -> RasterImage:
    se = se or StructuringElement.square(3)
    return img.with_pixels(kernels.erode(_binary(img), se.mask))


def dilate(img: RasterImage, se: StructuringElement | None = None) -> RasterImage:
    se = se or StructuringElement.square(3)
    return img.with_pixels(kernels.dilate(_binary(img), se.mask))


def opening(img: RasterImage, se: StructuringElement | None = None) -> RasterImage:
    """Erosion followed by dilation."""
    se = se or StructuringElement.square(3)
    return dilate(erode(img, se), se)


def complement(img: RasterImage) -> RasterImage:
    return img.with_pixels(np.where(img.pixels == 0, 255, 0).astype(np.uint8))


def lit_aspect_ratio(img: RasterImage) -> float:
    """Width / height of the lit pixels' bounding rectangle (nan if dark)."""
    rows, cols = np.nonzero(img.pixels)
    if len(rows) == 0:
        return math.nan
    return (cols.max() - cols.min() + 1) / (rows.max() - rows.min() + 1)
