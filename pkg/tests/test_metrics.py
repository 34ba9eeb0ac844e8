import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ssim_loop
from warphist.camera import (
    Intrinsics, Pose, Trajectory, axis_angle, make_primitive_trajectory, random_pose, rot_y,
)
from warphist.metrics import (
    PSNR_CAP, RuntimeProfile, estimate_pose_photometric, evaluate_chunk, psnr, read_csv,
    restrict_visible_fraction, ssim, trajectory_errors, write_csv,
)
from warphist.packing import mask_to_support
from warphist.synth import generate_scene, render


def test_psnr_oracle(rng):
    a = rng.uniform(size=(6, 6, 3))
    b = a + 0.1
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP
    m = np.zeros((6, 6), bool)
    m[:2] = True
    c = b.copy()
    c[2:] = 0.0  # outside the mask: ignored
    assert psnr(a, c, m) == pytest.approx(20.0)
    assert psnr(a, c, np.zeros((6, 6), bool)) is None
    with pytest.raises(ValueError):
        psnr(a, a[:3])


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(12, 14, 3))
    b = np.clip(a + rng.normal(scale=0.1 * (seed + 1), size=a.shape), 0, 1)
    want = np.mean([ssim_loop(a[..., c], b[..., c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(want, abs=1e-12)
    assert ssim(a[..., 0], b[..., 0]) == pytest.approx(ssim_loop(a[..., 0], b[..., 0]), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_mask_and_errors(rng):
    a = rng.uniform(size=(2, 16, 16, 3))
    b = rng.uniform(size=(2, 16, 16, 3))
    assert ssim(a, b, np.zeros((2, 16, 16), bool)) is None
    m = np.zeros((2, 16, 16), bool)
    m[:, :8, :8] = True
    b2 = b.copy()
    b2[:, :8, :8] = a[:, :8, :8]
    # the only fully covered window is the copied corner
    assert ssim(a, b2, m) > ssim(a, b2)
    with pytest.raises(ValueError):
        ssim(a[:, :4, :4], b[:, :4, :4])


def _rand_traj(rng, n=8):
    k = Intrinsics.from_fov(16, 16)
    return Trajectory(tuple(random_pose(rng, 2.0) for _ in range(n)), k)


def _gauge(traj, scale, T):
    poses = []
    for p in traj.poses:
        c = scale * T.rotation @ p.center + T.translation
        poses.append(Pose.from_center(T.rotation @ p.rotation.T, c))
    return Trajectory(tuple(poses), traj.intrinsics)


@given(st.integers(0, 10**6), st.floats(0.2, 5.0))
@settings(max_examples=50)
def test_trajectory_errors_gauge_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    gt = _rand_traj(rng)
    est = Trajectory(tuple(Pose(axis_angle(rng.normal(size=3), 0.05) @ p.rotation,
                                p.translation + rng.normal(scale=0.05, size=3)) for p in gt.poses),
                     gt.intrinsics)
    a = trajectory_errors(est, gt)
    b = trajectory_errors(_gauge(est, scale, random_pose(rng, 3.0)), gt)
    assert abs(a.r_err_deg - b.r_err_deg) <= 1e-6
    assert abs(a.t_err - b.t_err) <= 1e-6


@given(st.integers(0, 10**6), st.floats(0.2, 5.0))
@settings(max_examples=30)
def test_trajectory_errors_zero_for_similar_copy(seed, scale):
    rng = np.random.default_rng(seed)
    gt = _rand_traj(rng)
    e = trajectory_errors(_gauge(gt, scale, random_pose(rng, 3.0)), gt)
    assert e.r_err_deg <= 1e-6 and e.t_err <= 1e-6


def test_trajectory_errors_definition(k16):
    gt = make_primitive_trajectory("orbit", 5, 20.0, k16)
    # a 2 degree rotation error on the last frame, centers untouched
    bad = Pose.from_center(gt[4].rotation.T @ rot_y(2.0), gt[4].center)
    e = trajectory_errors(Trajectory(gt.poses[:4] + (bad,), k16), gt)
    assert not e.zero_path
    assert np.allclose(e.r_per_frame, [0, 0, 0, 0, 2.0], atol=1e-6)
    assert e.r_err_deg == pytest.approx(0.4, abs=1e-6)
    assert e.t_err <= 1e-9
    # zero-length ground truth path: raw error, flagged
    still = Trajectory((Pose.identity(),) * 4, k16)
    moved = Trajectory((Pose.identity(),) * 3 + (Pose(np.eye(3), [0.3, 0, 0]),), k16)
    z = trajectory_errors(moved, still)
    assert z.zero_path
    assert z.t_err == pytest.approx(np.mean([0.075, 0.075, 0.075, 0.225]))
    with pytest.raises(ValueError):
        trajectory_errors(still, Trajectory(still.poses[:3], k16))


@pytest.mark.parametrize("kind,mag", [("pan_right", 2.0), ("truck_right", 0.1), ("tilt_down", 1.5)])
def test_pose_estimator_recovers_single_frame(kind, mag, k16):
    sc = generate_scene(21)
    target = make_primitive_trajectory(kind, 2, mag, k16)[1]
    frame = render(sc, target, k16)[0]
    est = estimate_pose_photometric(frame, sc, k16, Pose.identity())
    assert est.converged
    from warphist.camera import rotation_geodesic_deg
    assert rotation_geodesic_deg(est.pose.rotation, target.rotation) < 0.1
    assert np.linalg.norm(est.pose.center - target.center) < 0.02


def test_evaluate_chunk_on_ground_truth(small_clip):
    tids = [2, 4, 6, 8]
    sub = small_clip.trajectory.subset(tids)
    valid = np.ones((4, 16, 16), bool)
    rep = evaluate_chunk(small_clip.frames[tids], small_clip.frames[tids], valid, sub,
                         generate_scene(3), tids, small_clip.trajectory[0])
    assert rep.psnr_db == PSNR_CAP and rep.ssim == pytest.approx(1.0)
    assert rep.vis_psnr_db == PSNR_CAP
    assert rep.r_err_deg < 0.5
    assert rep.flags["zero_path"]
    assert set(rep.row()) == {"r_err_deg", "t_err", "psnr_db", "ssim", "vis_psnr_db", "vis_ssim"}
    noest = evaluate_chunk(small_clip.frames[tids], small_clip.frames[tids], None, sub, None, tids,
                           small_clip.trajectory[0])
    assert noest.r_err_deg is None and noest.vis_psnr_db is None


def test_csv_undefined_roundtrip(tmp_path):
    write_csv(tmp_path / "x.csv", [{"a": 1.5, "b": None}, {"a": 2}], ("a", "b"))
    assert (tmp_path / "x.csv").read_text() == "a,b\n1.5,undefined\n2,undefined\n"
    assert read_csv(tmp_path / "x.csv")[0] == {"a": "1.5", "b": "undefined"}


@pytest.mark.parametrize("fraction", [0.75, 0.47, 0.1])
def test_restrict_visible_fraction_exact(fraction):
    rng = np.random.default_rng(0)
    valid = np.ones((8, 16, 16), bool)
    valid[:, :, 12:] = False  # one patch column of four is invisible
    rgb = rng.uniform(size=(8, 16, 16, 3))
    r2, v2 = restrict_visible_fraction(rgb, valid, fraction, (4, 4), 0.5, 3)
    sup = mask_to_support(v2, 4, 4)
    assert (sup >= 0.5).sum() == round(fraction * sup.size)
    assert not (v2 & ~valid).any()
    with pytest.raises(ValueError):
        restrict_visible_fraction(rgb, valid, 0.86, (4, 4), 0.5, 3)


def test_runtime_profile_check():
    p = RuntimeProfile("x", {"warp": 1.0, "packing": 1.0, "transformer": 1.0, "end_to_end": 3.0}, {}, 0.5)
    p.check()
    assert p.row()["end_to_end_s"] == 3.0
    p.seconds["end_to_end"] = 1.0
    with pytest.raises(ValueError):
        p.check()
