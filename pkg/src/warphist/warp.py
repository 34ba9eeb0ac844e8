"""Camera-induced warp videos and validity masks.

An observed frame is lifted to a colored point set with its depth map and
forward-splatted into every camera of a target trajectory. Pixels that
receive no point are holes (``valid == 0``, rgb 0); they are left for the
generator to complete.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .camera import Intrinsics, Pose, Trajectory, trajectory_diagnostics
from .formats import read_manifest, read_pgm, read_ppm, write_manifest, write_pgm, write_ppm
from .synth import ClipRecord, fg_centroid_motion
from .trajectory_io import read_trajectory, write_trajectory

BEHIND_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray  # (N, 3) world coordinates
    colors: np.ndarray  # (N, 3)


@dataclass(frozen=True, eq=False)
class WarpFrame:
    rgb: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True, eq=False)
class WarpVideo:
    frames: tuple
    source_frame_index: int
    trajectory: Trajectory

    def __len__(self):
        return len(self.frames)

    @property
    def rgb(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    @property
    def valid(self) -> np.ndarray:
        return np.stack([f.valid for f in self.frames])


def unproject(frame: np.ndarray, depth: np.ndarray, intrinsics: Intrinsics, camera_from_world: Pose) -> PointSet:
    """One world point per pixel center, colored by the frame."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if frame.shape[:2] != (H, W) or (intrinsics.height, intrinsics.width) != (H, W):
        raise ValueError(f"frame {frame.shape[:2]}, depth {depth.shape} and intrinsics "
                         f"{intrinsics.height}x{intrinsics.width} disagree")
    if not (np.all(np.isfinite(depth)) and np.all(depth > 0)):
        raise ValueError("depth must be finite and strictly positive")
    k = intrinsics
    v, u = np.mgrid[0:H, 0:W]
    x = (u.astype(np.float64) + 0.5 - k.cx) / k.fx * depth
    y = (v.astype(np.float64) + 0.5 - k.cy) / k.fy * depth
    z = depth
    # world = R^T (p - t), written out elementwise so the projection path stays reproducible
    R = camera_from_world.rotation
    t = camera_from_world.translation
    px, py, pz = x - t[0], y - t[1], z - t[2]
    wx = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
    wy = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
    wz = R[0, 2] * px + R[1, 2] * py + R[2, 2] * pz
    pts = np.stack([wx.ravel(), wy.ravel(), wz.ravel()], axis=1)
    return PointSet(pts, np.asarray(frame).reshape(-1, frame.shape[-1]))


def project_points(points: np.ndarray, camera: Pose, intrinsics: Intrinsics):
    """Pixel indices (nearest pixel center) and camera-space depth of world points."""
    R = camera.rotation
    t = camera.translation
    X, Y, Z = points[:, 0], points[:, 1], points[:, 2]
    cx_ = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
    cy_ = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
    cz_ = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
    front = cz_ > BEHIND_EPS
    safe_z = np.where(front, cz_, 1.0)
    u = intrinsics.fx * (cx_ / safe_z) + intrinsics.cx
    v = intrinsics.fy * (cy_ / safe_z) + intrinsics.cy
    front &= np.isfinite(u) & np.isfinite(v) & (np.abs(u) < 1e9) & (np.abs(v) < 1e9)
    return np.floor(u).astype(np.int64), np.floor(v).astype(np.int64), cz_, front


def forward_splat(points: PointSet, camera: Pose, intrinsics: Intrinsics, footprint: int = 1) -> WarpFrame:
    if points.points.shape[0] == 0:
        raise ValueError("cannot splat an empty point set")
    if footprint not in (1, 2):
        raise ValueError("footprint must be 1 or 2")
    ui, vi, z, front = project_points(points.points, camera, intrinsics)
    keep = np.flatnonzero(front)
    rgb, valid, _, _ = _kernels.splat(
        np.ascontiguousarray(ui[keep]), np.ascontiguousarray(vi[keep]), np.ascontiguousarray(z[keep]),
        points.colors[keep], intrinsics.width, intrinsics.height, footprint,
    )
    return WarpFrame(rgb, valid)


def build_warp_video(clip: ClipRecord, target_trajectory: Trajectory, source_frame_index: int = 0,
                     footprint: int = 1, jobs: int = 1) -> WarpVideo:
    """Warp one observed frame of ``clip`` into every camera of ``target_trajectory``."""
    if not 0 <= source_frame_index < len(clip):
        raise IndexError(f"source frame {source_frame_index} outside clip of length {len(clip)}")
    ks, kt = clip.trajectory.intrinsics, target_trajectory.intrinsics
    if (ks.width, ks.height) != (kt.width, kt.height):
        raise ValueError(f"resolution mismatch: clip {ks.width}x{ks.height}, target {kt.width}x{kt.height}")
    pts = unproject(clip.frames[source_frame_index], clip.depths[source_frame_index], ks,
                    clip.trajectory[source_frame_index])

    def one(pose):
        return forward_splat(pts, pose, kt, footprint)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            frames = tuple(pool.map(one, target_trajectory.poses))
    else:
        frames = tuple(one(p) for p in target_trajectory.poses)
    return WarpVideo(frames, source_frame_index, target_trajectory)


def invisible_ratio(mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    return float((~mask).sum() / mask.size)


DIAGNOSTIC_COLUMNS = (
    "inv_mean", "inv_max", "rot_mean_deg", "rot_max_deg", "trans_dir_angle_mean_deg", "fg_motion", "fg_area_mean",
)


@dataclass(frozen=True)
class SourceDiagnostics:
    inv_ratio_mean: float
    inv_ratio_max: float
    rot_mean_deg: float
    rot_max_deg: float
    trans_dir_angle_mean_deg: float
    fg_motion: float
    fg_area_mean: float

    def as_row(self) -> dict:
        return dict(zip(DIAGNOSTIC_COLUMNS, (
            self.inv_ratio_mean, self.inv_ratio_max, self.rot_mean_deg, self.rot_max_deg,
            self.trans_dir_angle_mean_deg, self.fg_motion, self.fg_area_mean,
        )))


def source_diagnostics(clip: ClipRecord, jobs: int = 1) -> SourceDiagnostics:
    """Profile a candidate finetuning source: disocclusion, camera rotation, foreground motion."""
    if len(clip) < 2:
        raise ValueError("diagnostics need at least 2 frames")
    wv = build_warp_video(clip, clip.trajectory, 0, jobs=jobs)
    inv = [invisible_ratio(f.valid) for f in wv.frames[1:]]
    td = trajectory_diagnostics(clip.trajectory)
    return SourceDiagnostics(
        inv_ratio_mean=float(np.mean(inv)),
        inv_ratio_max=float(np.max(inv)),
        rot_mean_deg=td.rot_mean_deg,
        rot_max_deg=td.rot_max_deg,
        trans_dir_angle_mean_deg=td.trans_dir_angle_mean_deg,
        fg_motion=fg_centroid_motion(clip.fg_masks),
        fg_area_mean=float(clip.fg_masks.mean()),
    )


def write_warp_video(wv: WarpVideo, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names, masks = [], []
    for i, f in enumerate(wv.frames):
        names.append(f"warp_{i:04d}.ppm")
        masks.append(f"valid_{i:04d}.pgm")
        write_ppm(d / names[-1], f.rgb)
        write_pgm(d / masks[-1], f.valid)
    write_trajectory(wv.trajectory, d / "cameras.txt")
    k = wv.trajectory.intrinsics
    write_manifest(d / "warp.manifest", {
        "format": "warphist-warp/1",
        "frames": len(wv),
        "width": k.width,
        "height": k.height,
        "source_frame_index": wv.source_frame_index,
        "frame_files": ",".join(names),
        "mask_files": ",".join(masks),
        "trajectory_file": "cameras.txt",
    })
    return d


def read_warp_video(directory) -> WarpVideo:
    d = Path(directory)
    man = read_manifest(d / "warp.manifest")
    w, h = int(man["width"]), int(man["height"])
    frames = tuple(
        WarpFrame(read_ppm(d / fn), read_pgm(d / mn))
        for fn, mn in zip(man["frame_files"].split(","), man["mask_files"].split(","))
    )
    traj = read_trajectory(d / man["trajectory_file"], w, h)
    return WarpVideo(frames, int(man["source_frame_index"]), traj)
