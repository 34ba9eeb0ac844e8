"""Image quality, camera adherence and runtime measurement.

Masked metrics return ``None`` (written as ``undefined``) when too few
pixels or windows qualify.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import Intrinsics, Pose, Trajectory, align_sim3, rotation_geodesic_deg, so3_exp, trajectory_diagnostics
from .synth import Scene, render

PSNR_CAP = 99.0
MIN_MASK_FRACTION = 0.01
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_MIN_COVERAGE = 0.5


def _pixel_mask(mask, shape):
    """Broadcast an (…, H, W) mask to image shape (…, H, W, C)."""
    m = np.asarray(mask, dtype=bool)
    if len(shape) == m.ndim + 1:
        m = np.broadcast_to(m[..., None], shape)
    return np.broadcast_to(m, shape)


def psnr(a: np.ndarray, b: np.ndarray, mask=None) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if mask is not None:
        m = _pixel_mask(mask, a.shape)
        if m.sum() < MIN_MASK_FRACTION * m.size or not m.any():
            return None
        d = d[m]
    mse = float(d.mean())
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _windows(x: np.ndarray, w: int) -> np.ndarray:
    """Means over all w×w windows (stride 1) of (..., H, W)."""
    s = np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(-2, -1))
    return s.mean(axis=(-2, -1))


def ssim(a: np.ndarray, b: np.ndarray, mask=None) -> float | None:
    """Mean local SSIM over 8×8 windows; with a mask, over windows at least half covered.

    Accepts (H, W), (H, W, C) or (F, H, W, C); channels are scored separately.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None, ..., None], b[None, ..., None]
        mask = None if mask is None else np.asarray(mask)[None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
        mask = None if mask is None else np.asarray(mask)[None]
    H, W = a.shape[1:3]
    w = SSIM_WINDOW
    if H < w or W < w:
        raise ValueError(f"images smaller than the {w}x{w} window")
    # (F, C, H, W)
    x = a.transpose(0, 3, 1, 2)
    y = b.transpose(0, 3, 1, 2)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _windows(x, w), _windows(y, w)
    vx = _windows(x * x, w) - mx * mx
    vy = _windows(y * y, w) - my * my
    cxy = _windows(x * y, w) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    if mask is None:
        return float(np.clip(s.mean(), -1.0, 1.0))
    cov = _windows(np.asarray(mask, dtype=np.float64), w)  # (F, h, w)
    ok = np.broadcast_to((cov >= SSIM_MIN_COVERAGE)[:, None], s.shape)
    if not ok.any():
        return None
    return float(np.clip(s[ok].mean(), -1.0, 1.0))


# --- pose estimation ------------------------------------------------------

GRID_SPANS_DEG = (4.0, 1.0, 0.25)
GRID_BLUR_PX = (2.0, 1.0, 0.5)
GRID_POINTS = 5
DESCENT_MIN_STEP = 1e-4
DESCENT_MAX_ITERS = 400
PROBE_ROUNDS = 4
PROBE_COUNT = 24
PROBE_SPAN_DEG = 0.25


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    loss: float
    iterations: int
    converged: bool


def _reference_depth(scene: Scene, camera: Pose, intrinsics: Intrinsics, frame_index: int) -> float:
    _, depth, _ = render(scene, camera, intrinsics, frame_index)
    return float(1.0 / np.mean(1.0 / depth))


def _perturb(init: Pose, p: np.ndarray, z_ref: float) -> Pose:
    """Apply a camera-frame update to ``init``.

    ``p[:3]`` is a rotation vector; ``p[3:]`` a translation in units of
    ``z_ref``. Sideways translation comes with the rotation that keeps
    points at depth ``z_ref`` fixed in the image, so the two groups of
    parameters separate parallax from pure image shift.
    """
    q = p[3:]
    omega = p[:3] + np.array([-q[1], q[0], 0.0])
    R = so3_exp(omega)
    t = -z_ref * q
    return Pose(R @ init.rotation, R @ init.translation + t)


def estimate_pose_photometric(frame: np.ndarray, scene: Scene, intrinsics: Intrinsics, init: Pose,
                              frame_index: int = 0) -> PoseEstimate:
    """Camera pose minimising mean squared error between ``render(scene, pose)`` and ``frame``.

    A 3-level per-parameter grid search around ``init``, on progressively
    less blurred images, picks a start. Pattern search refines both that
    start and ``init`` itself at full resolution, and random-direction
    probes then try to escape the local minima that occlusion edges create.
    """
    frame = np.asarray(frame, dtype=np.float64)
    z_ref = _reference_depth(scene, init, intrinsics, frame_index)

    def loss(p, sigma=0.0):
        rgb, _, _ = render(scene, _perturb(init, p, z_ref), intrinsics, frame_index)
        if sigma > 0:
            return float(((gaussian_filter(rgb, (sigma, sigma, 0)) - blurred[sigma]) ** 2).mean())
        return float(((rgb - frame) ** 2).mean())

    blurred = {s: gaussian_filter(frame, (s, s, 0)) for s in GRID_BLUR_PX}
    p = np.zeros(6)
    for span, sigma in zip(GRID_SPANS_DEG, GRID_BLUR_PX):
        best = loss(p, sigma)
        for i in range(6):
            for v in np.linspace(-1.0, 1.0, GRID_POINTS) * math.radians(span):
                if v == 0.0:
                    continue
                q = p.copy()
                q[i] += v
                lq = loss(q, sigma)
                if lq < best:
                    best, p = lq, q
    # Hooke-Jeeves: per-parameter exploration plus a pattern move along the
    # last successful displacement, which follows the narrow rotation/parallax valleys
    step = step0 = math.radians(GRID_SPANS_DEG[-1]) / 2

    def explore(base, lb, step):
        for i in range(6):
            for sgn in (1.0, -1.0):
                q = base.copy()
                q[i] += sgn * step
                lq = loss(q)
                if lq < lb:
                    base, lb = q, lq
                    break
        return base, lb

    def descend(p, best, step, iters):
        while iters < DESCENT_MAX_ITERS and step >= DESCENT_MIN_STEP:
            iters += 1
            cand, lc = explore(p, best, step)
            if lc < best:
                while iters < DESCENT_MAX_ITERS:
                    iters += 1
                    trial, lt = explore(2 * cand - p, loss(2 * cand - p), step)
                    p, best = cand, lc
                    if lt < lc:
                        cand, lc = trial, lt
                    else:
                        break
            else:
                step /= 2
        return p, best, step, iters

    # the blurred grid can settle in a wrong basin on small images, so the
    # unsearched start is refined too and the better of the two is kept
    p, best, step, iters = descend(p, loss(p), step, 0)
    q, lq, s, iters = descend(np.zeros(6), loss(np.zeros(6)), step0, iters)
    if lq < best:
        p, best, step = q, lq, s
    # random-direction probes escape the points where every axis step
    # flips an occlusion-edge pixel the wrong way
    rng = np.random.default_rng(frame_index)
    for _ in range(PROBE_ROUNDS):
        improved = False
        for _ in range(PROBE_COUNT):
            d = rng.standard_normal(6)
            d *= math.radians(PROBE_SPAN_DEG) * rng.uniform() / np.linalg.norm(d)
            for q in (p + d, p - d):
                lq = loss(q)
                if lq < best:
                    p, best, improved = q, lq, True
        if not improved:
            break
        p, best, step, iters = descend(p, best, step0, iters)
    converged = step < DESCENT_MIN_STEP
    return PoseEstimate(_perturb(init, p, z_ref), best, iters, converged)


def estimate_trajectory(frames, scene: Scene, intrinsics: Intrinsics, anchor: Pose, frame_indices):
    """Chain per-frame estimates, each initialised at the previous frame's result."""
    poses, flags = [], []
    cur = anchor
    for f, idx in zip(frames, frame_indices):
        est = estimate_pose_photometric(f, scene, intrinsics, cur, int(idx))
        cur = est.pose
        poses.append(est.pose)
        flags.append(est.converged)
    return poses, flags


@dataclass(frozen=True)
class TrajectoryErrors:
    r_err_deg: float
    t_err: float
    r_per_frame: tuple
    t_per_frame: tuple
    zero_path: bool


def trajectory_errors(est: Trajectory, gt: Trajectory) -> TrajectoryErrors:
    """Rotation and path-length-normalised position error after similarity alignment."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    scale, T = align_sim3(est, gt)
    Q = T.rotation
    r = [rotation_geodesic_deg(e.rotation @ Q.T, g.rotation) for e, g in zip(est.poses, gt.poses)]
    ce = (scale * (Q @ est.centers().T)).T + T.translation
    pe = np.linalg.norm(ce - gt.centers(), axis=1)
    path = trajectory_diagnostics(gt).path_length
    zero = path <= 1e-12
    tn = pe if zero else pe / path
    return TrajectoryErrors(float(np.mean(r)), float(np.mean(tn)), tuple(r), tuple(float(x) for x in tn), bool(zero))


# --- reports --------------------------------------------------------------

@dataclass
class MetricsReport:
    psnr_db: float | None
    ssim: float | None
    vis_psnr_db: float | None
    vis_ssim: float | None
    r_err_deg: float | None
    t_err: float | None
    per_frame: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


REPORT_COLUMNS = ("r_err_deg", "t_err", "psnr_db", "ssim", "vis_psnr_db", "vis_ssim")


def evaluate_chunk(generated: np.ndarray, reference: np.ndarray, valid: np.ndarray | None,
                   gt_trajectory: Trajectory, scene: Scene | None, frame_indices, anchor: Pose,
                   estimate_pose: bool = True) -> MetricsReport:
    """Score K generated frames against ground truth.

    ``gt_trajectory`` holds the K commanded cameras; the anchor (history
    camera) is prepended to both trajectories before comparison.
    """
    K = len(generated)
    per = {"psnr_db": [psnr(generated[i], reference[i]) for i in range(K)],
           "ssim": [ssim(generated[i], reference[i]) for i in range(K)]}
    vis_p = vis_s = None
    if valid is not None:
        per["vis_psnr_db"] = [psnr(generated[i], reference[i], valid[i]) for i in range(K)]
        vis_p = psnr(generated, reference, valid)
        vis_s = ssim(generated, reference, valid)
    r_err = t_err = None
    flags = {}
    if estimate_pose and scene is not None:
        poses, conv = estimate_trajectory(generated, scene, gt_trajectory.intrinsics, anchor, frame_indices)
        est = Trajectory((anchor,) + tuple(poses), gt_trajectory.intrinsics)
        gt = Trajectory((anchor,) + tuple(gt_trajectory.poses), gt_trajectory.intrinsics)
        te = trajectory_errors(est, gt)
        r_err, t_err = te.r_err_deg, te.t_err
        per["r_err_deg"] = list(te.r_per_frame[1:])
        per["t_err"] = list(te.t_per_frame[1:])
        flags["pose_unconverged"] = int(sum(not c for c in conv))
        flags["zero_path"] = te.zero_path
    return MetricsReport(psnr(generated, reference), ssim(generated, reference), vis_p, vis_s, r_err, t_err,
                         per, flags)


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def to_json(obj) -> str:
    def conv(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return json.dumps(obj, indent=1, sort_keys=True, default=conv)


# --- runtime profile ------------------------------------------------------

STAGES = ("warp", "packing", "transformer", "end_to_end")


@dataclass
class RuntimeProfile:
    regime: str
    seconds: dict
    tokens: dict
    visible_fraction: float | None

    def row(self) -> dict:
        r = {"regime": self.regime, "visible_fraction": self.visible_fraction}
        r.update({f"{s}_s": self.seconds.get(s, 0.0) for s in STAGES})
        r.update({f"tokens_{k}": v for k, v in self.tokens.items()})
        return r

    def check(self) -> None:
        sub = sum(self.seconds.get(s, 0.0) for s in STAGES[:-1])
        if self.seconds["end_to_end"] < 0.95 * sub:
            raise ValueError("end-to-end time is below the sum of its stages")


def restrict_visible_fraction(rgb: np.ndarray, valid: np.ndarray, fraction: float, patch, tau: float, seed: int):
    """Invalidate a seeded subset of visible patches so that ``round(fraction * N)`` tokens pass ``tau``."""
    from .packing import mask_to_support

    ph, pw = patch
    F, H, W = valid.shape
    nh, nw = H // ph, W // pw
    sup = mask_to_support(valid, ph, pw)
    visible = np.flatnonzero(sup >= tau)
    want = int(round(fraction * sup.size))
    if want > len(visible):
        raise ValueError(f"warp has only {len(visible)}/{sup.size} visible tokens, cannot reach {fraction:.2f}")
    drop = np.random.default_rng(seed).permutation(visible)[: len(visible) - want]
    rgb, valid = rgb.copy(), valid.copy()
    for flat in np.sort(drop):
        f, rem = divmod(int(flat), nh * nw)
        r, c = divmod(rem, nw)
        valid[f, r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = False
        rgb[f, r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = 0.0
    return rgb, valid


def profile_chunk(model, clip, target_indices, visible_fraction: float | None, tau: float = 0.5, seed: int = 0,
                  regime: str = "") -> RuntimeProfile:
    """Time warp construction, packing and sampling for one chunk.

    ``visible_fraction=None`` is the zero-warp baseline (text-only packing).
    """
    import time

    from .backbone import build_condition, sample_chunk
    from .packing import sequence_length_report
    from .warp import WarpFrame, WarpVideo, build_warp_video

    patch = model.cfg.patch
    sub = clip.trajectory.subset(list(target_indices))
    t_start = time.perf_counter()
    wv = None
    if visible_fraction is not None:
        wv = build_warp_video(clip, sub, 0)
        rgb, valid = restrict_visible_fraction(wv.rgb, wv.valid, visible_fraction, patch, tau, seed)
        wv = WarpVideo(tuple(WarpFrame(a, b) for a, b in zip(rgb, valid)), 0, sub)
    t_warp = time.perf_counter()
    packed = build_condition(clip, 0, target_indices, wv, "text_only" if wv is None else "full", patch, tau)
    t_pack = time.perf_counter()
    sample_chunk(model, packed, model.cfg.sample_steps, seed)
    t_end = time.perf_counter()
    counts = sequence_length_report(packed)
    seconds = {
        "warp": 0.0 if wv is None else t_warp - t_start,
        "packing": t_pack - t_warp,
        "transformer": t_end - t_pack,
        "end_to_end": t_end - t_start,
    }
    vis = None if wv is None else counts["warp_kept"] / max(1, counts["warp_candidates"])
    prof = RuntimeProfile(regime, seconds, counts, vis)
    prof.check()
    return prof
