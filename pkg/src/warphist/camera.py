"""Pinhole cameras, rigid poses and trajectories.

Poses are stored camera-from-world: ``x_cam = R @ x_world + t``. The OpenCV
axis convention is used throughout (x right, y down, z forward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_REPAIR_TOL = 1e-9
ORTHO_REJECT_TOL = 1e-3


class PoseError(ValueError):
    """Raised for rotations too far from orthonormal to repair."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive integers, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float = 53.13) -> "Intrinsics":
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height)


def _ortho_error(R: np.ndarray) -> float:
    return float(np.abs(R.T @ R - np.eye(3)).max())


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation in the Frobenius sense (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _checked_rotation(R) -> np.ndarray:
    R = np.array(R, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(R)):
        raise PoseError("rotation has non-finite entries")
    err = max(_ortho_error(R), abs(np.linalg.det(R) - 1.0))
    if err > ORTHO_REJECT_TOL:
        raise PoseError(f"rotation is not orthonormal (error {err:.3g} > {ORTHO_REJECT_TOL})")
    if err > ORTHO_REPAIR_TOL:
        R = orthonormalize(R)
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform, camera-from-world when used as a camera."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _checked_rotation(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_center(cls, world_from_camera_rotation, center) -> "Pose":
        """Build a camera from its orientation in the world and its optical center."""
        Rwc = np.asarray(world_from_camera_rotation, dtype=np.float64)
        R = Rwc.T
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates (for a camera-from-world pose)."""
        return -self.rotation.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) point array."""
        return points @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"Pose(R={self.rotation.round(6).tolist()}, t={self.translation.round(6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid transform that applies ``b`` first and then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def relative_pose(world_from_a: Pose, world_from_b: Pose) -> Pose:
    """Return ``a_from_b`` such that ``compose(world_from_a, a_from_b) == world_from_b``."""
    return compose(inverse(world_from_a), world_from_b)


def axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle_rad) * K + (1 - math.cos(angle_rad)) * (K @ K)


def rot_x(deg: float) -> np.ndarray:
    return axis_angle([1, 0, 0], math.radians(deg))


def rot_y(deg: float) -> np.ndarray:
    return axis_angle([0, 1, 0], math.radians(deg))


def rot_z(deg: float) -> np.ndarray:
    return axis_angle([0, 0, 1], math.radians(deg))


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-15:
        return np.eye(3)
    return axis_angle(omega / theta, theta)


def rotation_geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees, within [0, 180]."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    M = Ra.T @ Rb
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    # arccos loses precision near 0 and 180; the atan2 form does not
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return math.degrees(math.atan2(s, c))


def random_pose(rng: np.random.Generator, max_translation: float = 1.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose(R, rng.uniform(-max_translation, max_translation, size=3))


@dataclass(frozen=True, eq=False)
class Trajectory:
    poses: tuple
    intrinsics: Intrinsics
    frame_rate: float = 30.0
    timestamps: tuple | None = field(default=None)

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        if not all(isinstance(p, Pose) for p in poses):
            raise TypeError("trajectory poses must be Pose instances")
        object.__setattr__(self, "poses", poses)
        if self.timestamps is not None:
            ts = tuple(int(x) for x in self.timestamps)
            if len(ts) != len(poses):
                raise ValueError("timestamps length differs from pose count")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        ts = None if self.timestamps is None else [self.timestamps[i] for i in indices]
        return Trajectory(tuple(self.poses[i] for i in indices), self.intrinsics, self.frame_rate, ts)

    def allclose(self, other: "Trajectory", atol: float = 1e-9) -> bool:
        return len(self) == len(other) and all(a.allclose(b, atol) for a, b in zip(self.poses, other.poses))


# --- primitive camera motions -------------------------------------------

ROTATIONAL_KINDS = ("pan_left", "pan_right", "tilt_up", "tilt_down", "orbit")
TRANSLATIONAL_KINDS = ("dolly_in", "dolly_out", "truck_left", "truck_right")
PRIMITIVE_KINDS = ROTATIONAL_KINDS[:4] + TRANSLATIONAL_KINDS + ("orbit",)

ORBIT_PIVOT_DISTANCE = 4.0


def _primitive_pose(kind: str, s: float, magnitude: float) -> Pose:
    """Camera at interpolation fraction ``s`` in [0, 1]."""
    a = magnitude * s
    if kind == "pan_left":
        return Pose.from_center(rot_y(-a), np.zeros(3))
    if kind == "pan_right":
        return Pose.from_center(rot_y(a), np.zeros(3))
    if kind == "tilt_up":
        return Pose.from_center(rot_x(a), np.zeros(3))
    if kind == "tilt_down":
        return Pose.from_center(rot_x(-a), np.zeros(3))
    if kind == "dolly_in":
        return Pose.from_center(np.eye(3), [0.0, 0.0, a])
    if kind == "dolly_out":
        return Pose.from_center(np.eye(3), [0.0, 0.0, -a])
    if kind == "truck_left":
        return Pose.from_center(np.eye(3), [-a, 0.0, 0.0])
    if kind == "truck_right":
        return Pose.from_center(np.eye(3), [a, 0.0, 0.0])
    if kind == "orbit":
        phi = math.radians(a)
        d = ORBIT_PIVOT_DISTANCE
        center = np.array([-d * math.sin(phi), 0.0, d - d * math.cos(phi)])
        return Pose.from_center(rot_y(a), center)
    raise ValueError(f"unknown trajectory kind {kind!r}; expected one of {PRIMITIVE_KINDS}")


def make_primitive_trajectory(kind: str, frames: int, magnitude: float, intrinsics: Intrinsics,
                              frame_rate: float = 30.0) -> Trajectory:
    """Constant-velocity single-axis camera motion starting at the identity.

    ``magnitude`` is the total rotation in degrees for pan/tilt/orbit and the
    total displacement of the optical center (world units) otherwise.
    """
    if kind not in PRIMITIVE_KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}; expected one of {PRIMITIVE_KINDS}")
    if frames < 2:
        raise ValueError("a primitive trajectory needs at least 2 frames")
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    poses = [_primitive_pose(kind, i / (frames - 1), magnitude) for i in range(frames)]
    poses[0] = Pose.identity()
    return Trajectory(tuple(poses), intrinsics, frame_rate)


def static_trajectory(frames: int, intrinsics: Intrinsics) -> Trajectory:
    return Trajectory(tuple(Pose.identity() for _ in range(frames)), intrinsics)


def blend_trajectories(parts: Sequence[Trajectory]) -> Trajectory:
    """Compose several trajectories frame by frame (motions add up)."""
    n = len(parts[0])
    if any(len(p) != n for p in parts):
        raise ValueError("trajectories to blend must have equal length")
    poses = []
    for i in range(n):
        p = parts[0][i]
        for q in parts[1:]:
            p = compose(q[i], p)
        poses.append(p)
    return Trajectory(tuple(poses), parts[0].intrinsics, parts[0].frame_rate)


# --- alignment ------------------------------------------------------------

def align_sim3(est: Trajectory, gt: Trajectory, degenerate_tol: float = 1e-9):
    """Closed-form similarity mapping estimated camera centers onto ground truth.

    Returns ``(scale, transform)`` minimising ``sum |scale * Q p_est + t - p_gt|^2``
    with ``transform = Pose(Q, t)``. When either center set is a single
    point or nearly collinear (second singular value under 10% of the
    first) the rotation is not identifiable; the alignment then falls back
    to identity rotation, unit scale and a centroid shift.
    """
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if len(est) < 3:
        raise ValueError("alignment needs at least 3 poses")
    return umeyama(est.centers(), gt.centers(), degenerate_tol)


COLLINEAR_RATIO = 0.1


def _is_degenerate(centered: np.ndarray, tol: float) -> bool:
    """A single point or a (nearly) collinear path: the rotation about the path axis is unidentifiable."""
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[0] <= tol or sv[1] <= max(tol, COLLINEAR_RATIO * sv[0])


def umeyama(src: np.ndarray, dst: np.ndarray, degenerate_tol: float = 1e-9):
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    if _is_degenerate(xs, degenerate_tol) or _is_degenerate(xd, degenerate_tol):
        return 1.0, Pose(np.eye(3), mu_d - mu_s)
    n = len(src)
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    Q = U @ S @ Vt
    var_s = (xs**2).sum() / n
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * Q @ mu_s
    return scale, Pose(Q, t)


# --- diagnostics ------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryDiagnostics:
    rot_mean_deg: float
    rot_max_deg: float
    trans_dir_angle_mean_deg: float
    path_length: float


def _angle_between_deg(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def trajectory_diagnostics(traj: Trajectory) -> TrajectoryDiagnostics:
    if len(traj) < 2:
        raise ValueError("diagnostics need at least 2 poses")
    R0 = traj[0].rotation
    rots = [rotation_geodesic_deg(R0, p.rotation) for p in traj.poses[1:]]
    c = traj.centers()
    steps = np.diff(c, axis=0)
    norms = np.linalg.norm(steps, axis=1)
    moving = steps[norms >= 1e-9]
    angles = [_angle_between_deg(moving[i], moving[i + 1]) for i in range(len(moving) - 1)]
    return TrajectoryDiagnostics(
        rot_mean_deg=float(np.mean(rots)),
        rot_max_deg=float(np.max(rots)),
        trans_dir_angle_mean_deg=float(np.mean(angles)) if angles else 0.0,
        path_length=float(norms.sum()),
    )
