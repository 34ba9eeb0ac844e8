"""Procedural layered scenes with exact depth, cameras and foreground masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .camera import Intrinsics, Pose, Trajectory, inverse
from .formats import (
    FormatError,
    quantize,
    read_depth,
    read_manifest,
    read_pgm,
    read_ppm,
    write_depth,
    write_manifest,
    write_pgm,
    write_ppm,
)
from .trajectory_io import read_trajectory, write_trajectory

LATTICE = 16
OCTAVES = 3
FAR_DEPTH = 100.0
MIN_LAYERS, MAX_LAYERS = 2, 6


@dataclass(frozen=True, eq=False)
class Scene:
    """Fronto-parallel textured planes (nearest first) and an optional disk sprite.

    Texture/alpha parameters are stored as the flat arrays consumed by the
    render kernel; index ``len(layer_depths)`` of the texture arrays is the
    sprite texture.
    """

    seed: int
    layer_depths: np.ndarray
    layer_opaque: np.ndarray
    tex_lat: np.ndarray
    tex_freq: np.ndarray
    tex_amp: np.ndarray
    tex_off: np.ndarray
    tex_base: np.ndarray
    alpha_lat: np.ndarray
    alpha_freq: np.ndarray
    alpha_off: np.ndarray
    alpha_thr: np.ndarray
    background_color: np.ndarray
    sprite_enabled: bool
    sprite_depth: float
    sprite_radius: float
    sprite_start: np.ndarray
    sprite_velocity: np.ndarray

    def __post_init__(self):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                value.setflags(write=False)

    @property
    def n_layers(self) -> int:
        return len(self.layer_depths)

    def sprite_center(self, frame_index: int) -> np.ndarray:
        return self.sprite_start + frame_index * self.sprite_velocity

    def check(self) -> None:
        d = self.layer_depths
        if not (MIN_LAYERS <= len(d) <= MAX_LAYERS):
            raise ValueError(f"layer count {len(d)} outside [{MIN_LAYERS}, {MAX_LAYERS}]")
        if not np.all(np.diff(d) > 0) or d[0] <= 0:
            raise ValueError("layer depths must be positive and strictly increasing")
        if self.sprite_enabled and not (0 < self.sprite_depth < d[0]):
            raise ValueError("sprite must lie in front of the nearest layer")


def generate_scene(seed: int, sprite: bool | None = None, sprite_motion: bool | None = None,
                   sprite_speed: float = 0.012) -> Scene:
    """Deterministic random scene.

    ``sprite``/``sprite_motion`` force the foreground disk on/off and
    moving/static; ``None`` lets the seed decide.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5EED]))
    n_layers = int(rng.integers(3, 5))
    while True:
        depths = np.sort(rng.uniform(2.5, 12.0, size=n_layers))
        if np.all(np.diff(depths) >= 0.6):
            break
    opaque = np.zeros(n_layers, dtype=np.uint8)
    opaque[-1] = 1

    n_tex = n_layers + 1
    tex_lat = rng.uniform(-1.0, 1.0, size=(n_tex, OCTAVES, LATTICE, LATTICE, 3))
    scale_depth = np.append(depths, 1.0)  # sprite texture lives in sprite-local units
    base_cell = np.empty(n_tex)
    base_cell[:n_layers] = 0.4 * scale_depth[:n_layers]
    tex_freq = np.empty((n_tex, OCTAVES))
    tex_amp = np.empty((n_tex, OCTAVES))
    for o in range(OCTAVES):
        tex_freq[:, o] = (2.0**o)
        tex_amp[:, o] = 0.32 * 0.5**o
    tex_off = rng.uniform(0, LATTICE, size=(n_tex, OCTAVES, 2))
    tex_base = rng.uniform(0.2, 0.8, size=(n_tex, 3))

    alpha_lat = rng.uniform(-1.0, 1.0, size=(n_layers, LATTICE, LATTICE))
    alpha_cell = 0.35 * depths
    alpha_freq = 1.0 / alpha_cell
    alpha_off = rng.uniform(0, LATTICE, size=(n_layers, 2))
    alpha_thr = rng.uniform(-0.05, 0.2, size=n_layers)

    bg = rng.uniform(0.0, 1.0, size=3)

    has_sprite = bool(rng.random() < 0.5) if sprite is None else bool(sprite)
    moving = bool(rng.random() < 0.7) if sprite_motion is None else bool(sprite_motion)
    s_depth = float(rng.uniform(1.8, depths[0] - 0.4))
    s_radius = 0.14 * s_depth
    s_start = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)]) * s_depth
    ang = rng.uniform(0, 2 * math.pi)
    speed = sprite_speed * s_depth if moving else 0.0
    s_vel = np.array([math.cos(ang), math.sin(ang)]) * speed

    sprite_cell = 0.6 * s_radius
    base_cell[n_layers] = sprite_cell
    tex_freq = tex_freq / base_cell[:, None]

    scene = Scene(
        seed=int(seed),
        layer_depths=depths,
        layer_opaque=opaque,
        tex_lat=tex_lat,
        tex_freq=tex_freq,
        tex_amp=tex_amp,
        tex_off=tex_off,
        tex_base=tex_base,
        alpha_lat=alpha_lat,
        alpha_freq=alpha_freq,
        alpha_off=alpha_off,
        alpha_thr=alpha_thr,
        background_color=bg,
        sprite_enabled=has_sprite,
        sprite_depth=s_depth,
        sprite_radius=s_radius,
        sprite_start=s_start,
        sprite_velocity=s_vel,
    )
    scene.check()
    return scene


def render(scene: Scene, camera: Pose, intrinsics: Intrinsics, frame_index: int = 0):
    """Ray-cast the scene from a camera-from-world pose.

    Returns ``(rgb, depth, fg_mask)`` with rgb in [0, 1] (H, W, 3) float64,
    depth the camera-space z of the visible surface, and a boolean mask of
    sprite pixels.
    """
    Rwc = np.ascontiguousarray(camera.rotation.T)
    center = np.ascontiguousarray(camera.center)
    if scene.sprite_enabled:
        c = scene.sprite_center(frame_index)
        sprite = np.array([1.0, scene.sprite_depth, c[0], c[1], scene.sprite_radius])
    else:
        sprite = np.zeros(5)
    k = intrinsics
    return _kernels.render_layers(
        Rwc, center, float(k.fx), float(k.fy), float(k.cx), float(k.cy), int(k.width), int(k.height),
        scene.layer_depths, scene.layer_opaque, scene.tex_lat, scene.tex_freq, scene.tex_amp,
        scene.tex_off, scene.tex_base, scene.alpha_lat, scene.alpha_freq, scene.alpha_off,
        scene.alpha_thr, sprite, scene.background_color, FAR_DEPTH,
    )


@dataclass(frozen=True, eq=False)
class ClipRecord:
    frames: np.ndarray  # (T, H, W, 3) float64 on the 8-bit grid
    depths: np.ndarray  # (T, H, W) float32
    fg_masks: np.ndarray  # (T, H, W) bool
    trajectory: Trajectory
    scene_seed: int
    clip_id: str = ""

    def __post_init__(self):
        T = self.frames.shape[0]
        if T < 2:
            raise ValueError("a clip needs at least 2 frames")
        if self.depths.shape != self.frames.shape[:3] or self.fg_masks.shape != self.frames.shape[:3]:
            raise ValueError("frame, depth and mask shapes differ")
        if len(self.trajectory) != T:
            raise ValueError("trajectory length differs from frame count")
        if not (np.all(np.isfinite(self.depths)) and np.all(self.depths > 0)):
            raise ValueError("depth must be finite and positive")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:3]

    def equals(self, other: "ClipRecord") -> bool:
        return (
            np.array_equal(self.frames, other.frames)
            and np.array_equal(self.depths, other.depths)
            and np.array_equal(self.fg_masks, other.fg_masks)
            and self.trajectory.allclose(other.trajectory, 1e-9)
            and self.scene_seed == other.scene_seed
        )


def make_clip(scene: Scene, trajectory: Trajectory, clip_id: str = "") -> ClipRecord:
    if len(trajectory) < 2:
        raise ValueError("a clip needs a trajectory of at least 2 poses")
    frames, depths, masks = [], [], []
    for i, pose in enumerate(trajectory.poses):
        rgb, depth, fg = render(scene, pose, trajectory.intrinsics, i)
        frames.append(quantize(rgb))
        depths.append(depth.astype(np.float32))
        masks.append(fg)
    return ClipRecord(np.stack(frames), np.stack(depths), np.stack(masks), trajectory, scene.seed, clip_id)


def fg_centroid_motion(masks: np.ndarray) -> float:
    """Mean per-frame displacement of the foreground centroid, divided by the image diagonal."""
    h, w = masks.shape[1:3]
    diag = math.hypot(h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    cents = []
    for m in masks:
        if m.any():
            cents.append((float(xs[m].mean()), float(ys[m].mean())))
        else:
            cents.append(None)
    steps = [math.hypot(b[0] - a[0], b[1] - a[1]) / diag
             for a, b in zip(cents[:-1], cents[1:]) if a is not None and b is not None]
    return float(np.mean(steps)) if steps else 0.0


# --- clip directories -------------------------------------------------------

def write_clip(clip: ClipRecord, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T = len(clip)
    frame_names, mask_names = [], []
    for i in range(T):
        fn, mn = f"frame_{i:04d}.ppm", f"fg_{i:04d}.pgm"
        write_ppm(d / fn, clip.frames[i])
        write_pgm(d / mn, clip.fg_masks[i])
        frame_names.append(fn)
        mask_names.append(mn)
    write_depth(d / "depth.wahd", clip.depths)
    write_trajectory(clip.trajectory, d / "cameras.txt")
    k = clip.trajectory.intrinsics
    write_manifest(d / "clip.manifest", {
        "format": "warphist-clip/1",
        "clip_id": clip.clip_id,
        "scene_seed": clip.scene_seed,
        "frames": T,
        "width": k.width,
        "height": k.height,
        "frame_files": ",".join(frame_names),
        "mask_files": ",".join(mask_names),
        "depth_file": "depth.wahd",
        "trajectory_file": "cameras.txt",
    })
    return d


def read_clip(directory) -> ClipRecord:
    d = Path(directory)
    man = read_manifest(d / "clip.manifest")
    try:
        w, h, T = int(man["width"]), int(man["height"]), int(man["frames"])
        frame_files = man["frame_files"].split(",")
        mask_files = man["mask_files"].split(",")
    except KeyError as exc:
        raise FormatError(f"{d}/clip.manifest: missing key {exc}") from None
    if len(frame_files) != T or len(mask_files) != T:
        raise FormatError(f"{d}/clip.manifest: file lists do not match frame count {T}")
    frames = np.stack([read_ppm(d / f) for f in frame_files])
    masks = np.stack([read_pgm(d / f) for f in mask_files])
    depths = read_depth(d / man["depth_file"])
    if depths.shape != (T, h, w) or frames.shape != (T, h, w, 3):
        raise FormatError(f"{d}: stored arrays do not match manifest size {T}x{h}x{w}")
    traj = read_trajectory(d / man["trajectory_file"], w, h)
    return ClipRecord(frames, depths, masks, traj, int(man["scene_seed"]), man.get("clip_id", ""))


def unproject_check(depth: np.ndarray, intrinsics: Intrinsics, camera: Pose, pixels: np.ndarray) -> np.ndarray:
    """Reproject ``pixels`` (N, 2 of u, v indices) through stored depth; returns reprojected centers."""
    k = intrinsics
    u = pixels[:, 0] + 0.5
    v = pixels[:, 1] + 0.5
    z = depth[pixels[:, 1], pixels[:, 0]].astype(np.float64)
    pc = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
    pw = inverse(camera).apply(pc)
    pc2 = camera.apply(pw)
    return np.stack([k.fx * pc2[:, 0] / pc2[:, 2] + k.cx, k.fy * pc2[:, 1] / pc2[:, 2] + k.cy], axis=1)
