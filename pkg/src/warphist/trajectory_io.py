"""Text camera files in the RealEstate10K layout.

Each data line holds 19 whitespace-separated numbers::

    timestamp fx fy cx cy 0 0 r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2

Intrinsics are normalized by image width/height; the 3x4 matrix is
camera-from-world. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .camera import Intrinsics, Pose, PoseError, Trajectory

N_FIELDS = 19


class MalformedLineError(ValueError):
    def __init__(self, line_no: int, field_index: int | None, message: str):
        self.line_no = line_no
        self.field_index = field_index
        where = f"line {line_no}" + (f", field {field_index}" if field_index is not None else "")
        super().__init__(f"{where}: {message}")


def _parse_float(token: str, line_no: int, field_index: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedLineError(line_no, field_index, f"not a decimal number: {token!r}") from None
    if not np.isfinite(value):
        raise MalformedLineError(line_no, field_index, f"non-finite value: {token!r}")
    return value


def parse_trajectory_text(text: str, width: int, height: int, frame_rate: float = 30.0) -> Trajectory:
    """Parse a camera file; intrinsics are taken from the first data line."""
    poses = []
    stamps = []
    intr = None
    for line_no, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != N_FIELDS:
            raise MalformedLineError(line_no, min(len(fields), N_FIELDS),
                                     f"expected {N_FIELDS} fields, found {len(fields)}")
        ts = _parse_float(fields[0], line_no, 0)
        if ts != int(ts):
            raise MalformedLineError(line_no, 0, f"timestamp must be an integer, got {fields[0]!r}")
        vals = [_parse_float(tok, line_no, i) for i, tok in enumerate(fields)]
        if intr is None:
            fx, fy, cx, cy = vals[1:5]
            try:
                intr = Intrinsics(fx * width, fy * height, cx * width, cy * height, width, height)
            except ValueError as exc:
                raise MalformedLineError(line_no, 1, str(exc)) from None
        m = np.array(vals[7:], dtype=np.float64).reshape(3, 4)
        try:
            poses.append(Pose(m[:, :3], m[:, 3]))
        except PoseError as exc:
            raise MalformedLineError(line_no, 7, str(exc)) from None
        stamps.append(int(ts))
    if not poses:
        raise ValueError("camera file contains no data lines")
    return Trajectory(tuple(poses), intr, frame_rate, tuple(stamps))


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def serialize_trajectory(traj: Trajectory) -> str:
    k = traj.intrinsics
    norm = [k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / k.height]
    if traj.timestamps is not None:
        stamps = traj.timestamps
    else:
        step = 1e6 / traj.frame_rate
        stamps = [int(round(i * step)) for i in range(len(traj))]
    lines = []
    for ts, p in zip(stamps, traj.poses):
        m = np.hstack([p.rotation, p.translation[:, None]]).reshape(-1)
        lines.append(" ".join([str(int(ts))] + [_fmt(v) for v in norm] + ["0", "0"] + [_fmt(v) for v in m]))
    return "\n".join(lines) + "\n"


def read_trajectory(path, width: int, height: int) -> Trajectory:
    return parse_trajectory_text(Path(path).read_text(encoding="utf-8"), width, height)


def write_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_text(serialize_trajectory(traj), encoding="utf-8")
