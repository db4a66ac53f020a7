"""Tests for the focal, Procrustes and PnP solvers and the pose metrics."""

import numpy as np
import pytest

from pointmaps.geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DegenerateGeometryError,
    DepthMap,
    PointMap,
    RigidPose,
    ValidationError,
    unproject,
)
from pointmaps.solvers import (
    FocalEstimate,
    ScaledPose,
    least_squares_focal,
    pnp_ransac_pose,
    pose_metrics,
    procrustes_pose,
    rotation_geodesic_deg,
    translation_angle_deg,
    weiszfeld_focal,
)


def _K(f=500.0, w=64, h=48):
    return CameraIntrinsics(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)


def _rot(axis, deg):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    a = np.radians(deg)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


def _random_rot(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def _scene_pointmap(K, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1.0, 5.0, (K.height, K.width))
    return unproject(DepthMap.dense(d), K)


# ----------------------------------------------------------------- weiszfeld


def test_weiszfeld_recovers_exact_focal():
    K = _K(500.0)
    pm = _scene_pointmap(K)
    est = weiszfeld_focal(pm, (K.cx, K.cy))
    assert est.converged
    assert abs(est.focal - 500.0) < 0.01


def test_weiszfeld_invariant_to_uniform_rescale():
    K = _K(500.0)
    pm = _scene_pointmap(K, seed=1)
    f1 = weiszfeld_focal(pm, (K.cx, K.cy)).focal
    scaled = PointMap(23.0 * pm.points, pm.valid.copy())
    f2 = weiszfeld_focal(scaled, (K.cx, K.cy)).focal
    assert abs(f1 - f2) < 1e-9


def test_weiszfeld_robust_to_outliers_where_ls_fails():
    rng = np.random.default_rng(2)
    K = _K(500.0)
    pm = _scene_pointmap(K, seed=2)
    pts = pm.points.copy()
    n = pts[..., 0].size
    n_out = int(round(0.05 * n))
    flat = rng.choice(n, size=n_out, replace=False)
    jj, ii = np.unravel_index(flat, pm.shape)
    # outliers are mismatched correspondences: these pixels get the 3D
    # points of other, unrelated pixels
    src = rng.choice(n, size=n_out, replace=False)
    sj, si = np.unravel_index(src, pm.shape)
    pts[jj, ii] = pm.points[sj, si]
    corrupted = PointMap(pts, pm.valid.copy())
    ls = least_squares_focal(corrupted, (K.cx, K.cy))
    robust = weiszfeld_focal(corrupted, (K.cx, K.cy))
    assert abs(ls - 500.0) / 500.0 > 0.01  # the plain fit is dragged away
    assert abs(robust.focal - 500.0) / 500.0 < 0.01


def test_weiszfeld_degenerate_principal_ray():
    pts = np.zeros((4, 4, 3))
    pts[..., 2] = 2.0  # every point straight ahead
    pm = PointMap(pts, np.ones((4, 4), dtype=bool))
    est = weiszfeld_focal(pm, (0.0, 0.0))
    assert not est.converged


def test_weiszfeld_needs_ten_pixels():
    pm = PointMap(np.ones((3, 3, 3)), np.ones((3, 3), dtype=bool))
    with pytest.raises(ValidationError):
        weiszfeld_focal(pm, (1.0, 1.0))


def test_focal_estimate_invariant():
    with pytest.raises(ValidationError):
        FocalEstimate(focal=-5.0, iterations=3, converged=True)


# ---------------------------------------------------------------- procrustes


def _pair_for_procrustes(rng, sigma, R, t, H=12, W=16):
    pts22 = rng.uniform(-2, 2, (H, W, 3)) + [0, 0, 5]
    x22 = PointMap(pts22, np.ones((H, W), dtype=bool), subject=1, frame=1)
    pts21 = sigma * (pts22 @ R.T + t)
    x21 = PointMap(pts21, np.ones((H, W), dtype=bool), subject=1, frame=0)
    c22 = ConfidenceMap(1.0 + rng.random((H, W)))
    c21 = ConfidenceMap(1.0 + rng.random((H, W)))
    return x22, x21, c22, c21


def test_procrustes_identity():
    rng = np.random.default_rng(3)
    x22, x21, c22, c21 = _pair_for_procrustes(rng, 1.0, np.eye(3), np.zeros(3))
    sp = procrustes_pose(x22, x21, c22, c21)
    assert np.abs(sp.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(sp.translation).max() < 1e-9
    assert abs(sp.scale - 1.0) < 1e-9


def test_procrustes_recovers_known_transform():
    rng = np.random.default_rng(4)
    for _ in range(10):
        R = _random_rot(rng)
        t = rng.uniform(-3, 3, 3)
        sigma = float(rng.uniform(0.2, 4.0))
        x22, x21, c22, c21 = _pair_for_procrustes(rng, sigma, R, t)
        sp = procrustes_pose(x22, x21, c22, c21)
        assert rotation_geodesic_deg(sp.rotation, R) < 1e-9
        assert np.abs(sp.translation - t).max() < 1e-9
        assert abs(sp.scale - sigma) / sigma < 1e-9


def test_procrustes_confidence_rescale_invariant():
    rng = np.random.default_rng(5)
    R = _random_rot(rng)
    x22, x21, c22, c21 = _pair_for_procrustes(rng, 2.0, R, np.array([1.0, -0.5, 0.25]))
    a = procrustes_pose(x22, x21, c22, c21)
    b = procrustes_pose(
        x22, x21, ConfidenceMap(2.0 * c22.values), ConfidenceMap(2.0 * c21.values)
    )
    assert np.abs(a.rotation - b.rotation).max() < 1e-12
    assert np.abs(a.translation - b.translation).max() < 1e-12
    assert abs(a.scale - b.scale) < 1e-12


def test_procrustes_rejects_collinear_points():
    H, W = 1, 20
    line = np.zeros((H, W, 3))
    line[0, :, 2] = np.linspace(1, 5, W)
    x22 = PointMap(line, np.ones((H, W), dtype=bool), subject=1, frame=1)
    x21 = PointMap(line.copy(), np.ones((H, W), dtype=bool), subject=1, frame=0)
    conf = ConfidenceMap.uniform((H, W))
    with pytest.raises(DegenerateGeometryError):
        procrustes_pose(x22, x21, conf, conf)


def test_procrustes_respects_joint_valid_set():
    rng = np.random.default_rng(6)
    R = _random_rot(rng)
    t = np.array([0.5, 0.5, 0.5])
    x22, x21, c22, c21 = _pair_for_procrustes(rng, 1.5, R, t)
    # corrupt pixels that are invalid in one map; the fit must not move
    pts = x21.points.copy()
    valid21 = np.ones(x21.shape, dtype=bool)
    valid21[0, :4] = False
    pts[0, :4] = 1e6
    x21_masked = PointMap(pts, valid21, subject=1, frame=0)
    sp = procrustes_pose(x22, x21_masked, c22, c21)
    assert rotation_geodesic_deg(sp.rotation, R) < 1e-9
    assert np.abs(sp.translation - t).max() < 1e-8


def test_procrustes_global_optimality_spot_check():
    rng = np.random.default_rng(7)
    R = _random_rot(rng)
    t = rng.uniform(-1, 1, 3)
    x22, x21, c22, c21 = _pair_for_procrustes(rng, 1.7, R, t, H=6, W=8)
    # add noise so the optimum is not exactly zero
    noisy = PointMap(
        x21.points + 0.05 * rng.standard_normal(x21.points.shape),
        x21.valid.copy(),
        subject=1,
        frame=0,
    )
    sp = procrustes_pose(x22, noisy, c22, c21)
    w = np.sqrt(c22.values * c21.values)

    def objective(sigma, Rm, tv):
        pred = sigma * (x22.points @ Rm.T + tv)
        return np.sum(w * np.sum((pred - noisy.points) ** 2, axis=-1))

    best = objective(sp.scale, sp.rotation, sp.translation)
    for _ in range(10000):
        dR = _rot(rng.standard_normal(3), rng.uniform(0, 5.0))
        sigma = sp.scale * np.exp(rng.uniform(-0.1, 0.1))
        tv = sp.translation + rng.uniform(-0.1, 0.1, 3)
        assert objective(sigma, dR @ sp.rotation, tv) >= best - 1e-9 * abs(best)


# ----------------------------------------------------------------------- pnp


def _pnp_problem(rng, K, pose, H=16, W=20, noise=0.0):
    pts_w = rng.uniform(-2, 2, (H, W, 3)) + [0, 0, 6]
    # world points seen by the camera at `pose` (world-to-camera)
    cam = pts_w @ pose.rotation.T + pose.translation
    assert (cam[..., 2] > 0.1).all()
    u = K.fx * cam[..., 0] / cam[..., 2] + K.cx
    v = K.fy * cam[..., 1] / cam[..., 2] + K.cy
    pix = np.stack([u, v], axis=-1)
    if noise:
        pix = pix + rng.normal(0, noise, pix.shape)
    pm = PointMap(pts_w, np.ones((H, W), dtype=bool), subject=0, frame=-1)
    return pm, pix


def test_pnp_exact_on_noise_free_data():
    rng = np.random.default_rng(8)
    K = _K(400.0, 64, 64)
    pose = RigidPose(_rot([0.2, 1.0, 0.1], 15.0), np.array([0.3, -0.2, 0.5]))
    pm, pix = _pnp_problem(rng, K, pose)
    sp = pnp_ransac_pose(pm, pix, K, iters=50, thresh_px=1.0, seed=0)
    assert sp.scale == 1.0
    assert rotation_geodesic_deg(sp.rotation, pose.rotation) < 1e-6
    assert np.abs(sp.translation - pose.translation).max() < 1e-6


def test_pnp_robust_to_thirty_percent_outliers():
    rng = np.random.default_rng(9)
    K = _K(400.0, 64, 64)
    pose = RigidPose(_rot([0.5, -0.3, 1.0], 25.0), np.array([-0.4, 0.1, 0.8]))
    pm, pix = _pnp_problem(rng, K, pose)
    n = pm.shape[0] * pm.shape[1]
    bad = rng.choice(n, size=int(0.3 * n), replace=False)
    jj, ii = np.unravel_index(bad, pm.shape)
    pix[jj, ii, 0] = rng.uniform(0, K.width, bad.size)
    pix[jj, ii, 1] = rng.uniform(0, K.height, bad.size)
    sp = pnp_ransac_pose(pm, pix, K, iters=1000, thresh_px=2.0, seed=1)
    assert rotation_geodesic_deg(sp.rotation, pose.rotation) < 0.1


def test_pnp_deterministic_per_seed():
    rng = np.random.default_rng(10)
    K = _K(300.0, 48, 48)
    pose = RigidPose(_rot([0, 1, 0], 10.0), np.array([0.2, 0.0, 0.3]))
    pm, pix = _pnp_problem(rng, K, pose, noise=0.5)
    a = pnp_ransac_pose(pm, pix, K, iters=200, thresh_px=2.0, seed=5)
    b = pnp_ransac_pose(pm, pix, K, iters=200, thresh_px=2.0, seed=5)
    assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(a.translation, b.translation)


def test_pnp_too_few_points_fails():
    pts = np.zeros((1, 3, 3))
    pts[0, :, 2] = [1.0, 2.0, 3.0]
    pm = PointMap(pts, np.ones((1, 3), dtype=bool))
    pix = np.zeros((1, 3, 2))
    with pytest.raises(ValidationError):
        pnp_ransac_pose(pm, pix, _K(), iters=10, thresh_px=2.0, seed=0)


def test_pnp_no_consensus_fails():
    # pure-noise observations: no model should collect 4 inliers at a tight threshold
    rng = np.random.default_rng(11)
    K = _K(400.0, 32, 32)
    pts = rng.uniform(-2, 2, (4, 4, 3)) + [0, 0, 5]
    pm = PointMap(pts, np.ones((4, 4), dtype=bool))
    pix = np.stack(
        [rng.uniform(0, 32, (4, 4)), rng.uniform(0, 32, (4, 4))], axis=-1
    )
    with pytest.raises(DegenerateGeometryError):
        pnp_ransac_pose(pm, pix, K, iters=30, thresh_px=1e-6, seed=0)


# -------------------------------------------------------------- pose metrics


def test_pose_metrics_identical():
    p = RigidPose(_rot([0, 0, 1], 30.0), np.array([1.0, 2.0, 3.0]))
    sp = ScaledPose(p.rotation, p.translation, 1.0)
    rra, rta = pose_metrics(sp, p)
    assert rra < 1e-9 and rta < 1e-9


def test_pose_metrics_ten_degree_rotation():
    a = RigidPose(np.eye(3), np.array([0.0, 0.0, 1.0]))
    b = ScaledPose(_rot([0, 0, 1], 10.0), np.array([0.0, 0.0, 1.0]), 1.0)
    rra, rta = pose_metrics(b, a)
    assert abs(rra - 10.0) < 1e-9
    assert rta < 1e-9


def test_pose_metrics_direction_only():
    gt = RigidPose(np.eye(3), np.array([0.0, 1.0, 0.0]))
    pred = ScaledPose(np.eye(3), np.array([0.0, 3.0, 0.0]), 1.0)
    _, rta = pose_metrics(pred, gt)
    assert rta < 1e-12


def test_pose_metrics_zero_translation_flagged():
    gt = RigidPose(np.eye(3), np.zeros(3))
    pred = ScaledPose(np.eye(3), np.array([0.0, 1.0, 0.0]), 1.0)
    _, rta = pose_metrics(pred, gt)
    assert np.isnan(rta)


def test_translation_angle_symmetry():
    rng = np.random.default_rng(12)
    for _ in range(10):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert abs(translation_angle_deg(a, b) - translation_angle_deg(b, a)) < 1e-9


def test_scaled_pose_validation():
    with pytest.raises(ValidationError):
        ScaledPose(np.eye(3), np.zeros(3), scale=0.0)
    with pytest.raises(ValidationError):
        ScaledPose(np.eye(3) * 2.0, np.zeros(3), scale=1.0)


# ------------------------------------------------- solver agreement (smoke)


def test_procrustes_and_pnp_agree_on_clean_pair():
    rng = np.random.default_rng(13)
    K = _K(350.0, 40, 30)
    R12 = _rot([0.1, 1.0, 0.2], 12.0)
    t12 = np.array([0.25, -0.1, 0.05])
    p12 = RigidPose(R12, t12)
    # image 2 geometry in its own frame, then moved to frame 1
    d2 = np.random.default_rng(14).uniform(2.0, 6.0, (K.height, K.width))
    x22 = unproject(DepthMap.dense(d2), K, subject=1)
    p21 = p12.inverse()
    pts21 = x22.points @ p21.rotation.T + p21.translation
    x21 = PointMap(pts21, x22.valid.copy(), subject=1, frame=0)
    conf = ConfidenceMap.uniform(x22.shape, 2.0)
    sp = procrustes_pose(x22, x21, conf, conf)
    # PnP: frame-1 points of image 2 observed by camera 2's pixel grid
    cols, rows = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    pix = np.stack([cols, rows], axis=-1)
    pnp = pnp_ransac_pose(x21, pix, K, iters=100, thresh_px=1.0, seed=3)
    # procrustes maps frame2->frame1; pnp recovers frame1->frame2
    pnp_21 = pnp.rigid().inverse()
    rra, rta = pose_metrics(sp, pnp_21)
    assert rra < 2.0
    assert rta < 2.0 or np.isnan(rta)
    # both agree with the ground-truth relative pose as well
    rra_gt, rta_gt = pose_metrics(sp, p21)
    assert rra_gt < 0.01 and rta_gt < 0.01
