"""Frame files: one ``x y z`` point per line, optional ``# timestamp <s>`` header."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import Frame


class FrameFormatError(ValueError):
    pass


def write_frame(path, points, timestamp: float | None = None, extra_columns=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = []
    if timestamp is not None:
        lines.append(f"# timestamp {timestamp:.6f}")
    if extra_columns is None:
        lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts)
    else:
        extra = np.asarray(extra_columns).reshape(len(pts), -1)
        for (x, y, z), e in zip(pts, extra):
            lines.append(f"{x:.6f} {y:.6f} {z:.6f} " + " ".join(str(int(v)) for v in e))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_frame(path, default_timestamp: float = 0.0, columns: int = 3) -> tuple[Frame, np.ndarray | None]:
    """Parse one frame file; returns the frame and any integer extra columns."""
    timestamp = default_timestamp
    rows, extras = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FrameFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if len(parts) == 2 and parts[0] == "timestamp":
                try:
                    timestamp = float(parts[1])
                except ValueError:
                    raise FrameFormatError(f"{path}:{lineno}: bad timestamp {parts[1]!r}") from None
            continue
        parts = s.split()
        if len(parts) < 3:
            raise FrameFormatError(f"{path}:{lineno}: expected 'x y z', got {s!r}")
        try:
            xyz = [float(v) for v in parts[:3]]
        except ValueError:
            raise FrameFormatError(f"{path}:{lineno}: non-numeric field in {s!r}") from None
        if not all(np.isfinite(xyz)):
            raise FrameFormatError(f"{path}:{lineno}: non-finite coordinate in {s!r}")
        rows.append(xyz)
        if columns > 3:
            try:
                extras.append([int(v) for v in parts[3:columns]])
            except ValueError:
                raise FrameFormatError(f"{path}:{lineno}: non-integer extra column in {s!r}") from None
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    extra = np.array(extras, dtype=np.int64).reshape(len(rows), columns - 3) if columns > 3 else None
    return Frame(timestamp, pts), extra


def frame_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FrameFormatError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix == ".txt")
    if not files:
        raise FrameFormatError(f"{d}: no frame files")
    return files


def ingest_frames(directory, frame_dt: float = 0.1) -> list[Frame]:
    """Read every ``*.txt`` frame in name order.

    Files without a timestamp header get ``index * frame_dt``. Timestamps
    must strictly increase.
    """
    frames = []
    for i, f in enumerate(frame_files(directory)):
        frame, _ = read_frame(f, default_timestamp=i * frame_dt)
        if frames and frame.timestamp <= frames[-1].timestamp:
            raise FrameFormatError(f"{f}: timestamp {frame.timestamp} does not increase")
        frames.append(frame)
    return frames
