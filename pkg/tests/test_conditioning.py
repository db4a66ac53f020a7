"""Tests for prior encoding: rays, normalized depth, pose tokens, subsets."""

import numpy as np
import pytest

from pointmaps.conditioning import (
    MODALITY_SLOTS,
    AuxiliaryBundle,
    PoseToken,
    RayMap,
    encode_pose,
    normalize_depth_input,
    rays_from_intrinsics,
    sample_modality_subset,
    sparsify,
)
from pointmaps.fileio import load_raw_grid
from pointmaps.geometry import (
    CameraIntrinsics,
    DegenerateGeometryError,
    DepthMap,
    RigidPose,
    ValidationError,
)
from pointmaps.stitching import CropSpec


def _K(f=50.0, w=40, h=30):
    return CameraIntrinsics(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)


# --------------------------------------------------------------------- rays


def test_ray_at_principal_point_is_optical_axis():
    K = CameraIntrinsics(fx=100.0, fy=100.0, cx=8.0, cy=6.0, width=16, height=12)
    rays = rays_from_intrinsics(K)
    assert np.allclose(rays.directions[6, 8], [0.0, 0.0, 1.0], atol=1e-15)


def test_ray_one_focal_length_off_axis():
    K = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=8.0, width=16, height=16)
    rays = rays_from_intrinsics(K)
    # pixel (cx + f, cy) sees a 45 degree ray
    assert np.allclose(rays.directions[8, 14], [1.0, 0.0, 1.0], atol=1e-15)


def test_ray_z_identically_one():
    rays = rays_from_intrinsics(_K())
    assert np.all(rays.directions[..., 2] == 1.0)


def test_crop_rays_match_parent_window():
    K = _K(w=200, h=100)
    full = rays_from_intrinsics(K)
    crop = CropSpec(100, 0, 32, 24, K)
    sub = rays_from_intrinsics(K, crop)
    assert sub.shape == (24, 32)
    assert np.array_equal(sub.directions, full.directions[0:24, 100:132])


def test_crop_rays_equal_crop_intrinsics_route():
    K = _K(w=64, h=48)
    crop = CropSpec(10, 20, 16, 16, K)
    via_parent = rays_from_intrinsics(K, crop)
    via_crop_K = rays_from_intrinsics(crop.intrinsics())
    assert np.abs(via_parent.directions - via_crop_K.directions).max() < 1e-12


def test_crop_rays_reject_foreign_parent():
    K = _K(w=64, h=48)
    other = _K(f=60.0, w=64, h=48)
    crop = CropSpec(0, 0, 16, 16, other)
    with pytest.raises(ValidationError):
        rays_from_intrinsics(K, crop)


def test_ray_scaling_invariance():
    # doubling focal and pixel offsets leaves physical rays unchanged
    K1 = CameraIntrinsics(fx=50.0, fy=50.0, cx=20.0, cy=15.0, width=40, height=30)
    K2 = K1.scaled(2.0)
    r1 = rays_from_intrinsics(K1)
    r2 = rays_from_intrinsics(K2)
    assert np.abs(r2.directions[::2, ::2] - r1.directions).max() < 1e-12


def test_raymap_rejects_bad_z():
    with pytest.raises(ValidationError):
        RayMap(np.ones((2, 2, 3)) * 2.0)


def test_raymap_raw_export_stacks_channels(tmp_path):
    rays = rays_from_intrinsics(_K(w=8, h=6))
    path = tmp_path / "rays.raw"
    rays.to_raw(path)
    grid = load_raw_grid(path)
    assert grid.shape == (18, 8)
    assert np.allclose(grid[12:18], 1.0)


# -------------------------------------------------------------------- depth


def test_normalize_constant_depth():
    d = DepthMap.dense(np.full((4, 4), 5.0))
    out = normalize_depth_input(d)
    assert out.scale == 5.0
    assert np.all(out.dprime == 1.0)


def test_normalize_single_valid_pixel():
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 1] = True
    d = DepthMap(np.where(mask, 2.0, 0.0), mask)
    out = normalize_depth_input(d)
    assert out.dprime[1, 1] == 1.0
    assert np.all(out.dprime[~mask] == 0.0)
    assert out.scale == 2.0


def test_normalize_mean_matches_recomputation():
    rng = np.random.default_rng(0)
    vals = rng.uniform(0.5, 6.0, (10, 12))
    mask = rng.random((10, 12)) > 0.4
    d = DepthMap(np.where(mask, vals, 0.0), mask)
    out = normalize_depth_input(d)
    want = vals[mask].mean() / vals[mask].mean()
    assert abs(out.dprime[mask].mean() - want) < 1e-12
    assert abs(out.scale - vals[mask].mean()) < 1e-12


def test_normalize_roundtrip():
    rng = np.random.default_rng(1)
    vals = rng.uniform(0.5, 6.0, (7, 9))
    mask = rng.random((7, 9)) > 0.3
    d = DepthMap(np.where(mask, vals, 0.0), mask)
    restored = normalize_depth_input(d).restore()
    assert np.array_equal(restored.mask, mask)
    # divide-then-multiply is exact up to one rounding per pixel
    rel = np.abs(restored.values[mask] - vals[mask]) / vals[mask]
    assert rel.max() <= 2.0 ** -50


def test_normalize_rejects_empty_mask():
    d = DepthMap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(DegenerateGeometryError):
        normalize_depth_input(d)


def test_stacked_channel_order():
    d = DepthMap.dense(np.full((2, 2), 3.0))
    out = normalize_depth_input(d).stacked()
    assert out.shape == (2, 2, 2)
    assert np.all(out[..., 0] == 1.0)
    assert np.all(out[..., 1] == 1.0)


# ----------------------------------------------------------------- sparsify


def test_sparsify_keep_all_is_identity():
    rng = np.random.default_rng(2)
    d = DepthMap.dense(rng.uniform(1, 2, (6, 6)))
    out = sparsify(d, 1.0, seed=0)
    assert np.array_equal(out.mask, d.mask)
    assert np.array_equal(out.values, d.values)


def test_sparsify_exact_count():
    d = DepthMap.dense(np.ones((25, 40)))
    out = sparsify(d, 0.25, seed=3)
    assert out.mask.sum() == 250


def test_sparsify_deterministic_per_seed():
    d = DepthMap.dense(np.ones((20, 20)))
    a = sparsify(d, 0.5, seed=7)
    b = sparsify(d, 0.5, seed=7)
    c = sparsify(d, 0.5, seed=8)
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask)


def test_sparsify_subset_of_original_mask():
    rng = np.random.default_rng(4)
    vals = rng.uniform(1, 2, (12, 12))
    mask = rng.random((12, 12)) > 0.5
    d = DepthMap(np.where(mask, vals, 0.0), mask)
    out = sparsify(d, 0.4, seed=11)
    assert not (out.mask & ~mask).any()
    assert np.array_equal(out.values[out.mask], vals[out.mask])


def test_sparsify_rejects_zero_ratio():
    d = DepthMap.dense(np.ones((4, 4)))
    with pytest.raises(ValidationError):
        sparsify(d, 0.0, seed=0)


# --------------------------------------------------------------- pose token


def test_encode_identity_pose_flagged_degenerate():
    tok = encode_pose(RigidPose.identity())
    assert tok.degenerate
    assert np.all(tok.tnorm == 0.0)
    assert np.allclose(tok.rotation, np.eye(3))


def test_encode_axis_translation():
    tok = encode_pose(RigidPose(np.eye(3), np.array([0.0, 0.0, 7.0])))
    assert not tok.degenerate
    assert np.allclose(tok.tnorm, [0.0, 0.0, 1.0])


def test_encode_random_pose_unit_direction():
    rng = np.random.default_rng(5)
    for _ in range(20):
        A = rng.standard_normal((3, 3))
        Q, _ = np.linalg.qr(A)
        if np.linalg.det(Q) < 0:
            Q[:, 0] = -Q[:, 0]
        tok = encode_pose(RigidPose(Q, rng.uniform(-5, 5, 3)))
        assert abs(np.linalg.norm(tok.tnorm) - 1.0) < 1e-12


def test_pose_token_vector_layout():
    R = np.arange(9).reshape(3, 3)
    Q, _ = np.linalg.qr(np.random.default_rng(6).standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    tok = encode_pose(RigidPose(Q, np.array([3.0, 0.0, 4.0])))
    v = tok.vector()
    assert v.shape == (12,)
    assert np.array_equal(v[:9], Q.reshape(-1))
    assert np.allclose(v[9:], [0.6, 0.0, 0.8])


def test_pose_token_validation():
    with pytest.raises(ValidationError):
        PoseToken(np.eye(3), np.array([0.0, 0.0, 2.0]))


# ------------------------------------------------------------ subsets


def test_subset_sampler_deterministic():
    assert sample_modality_subset(123) == sample_modality_subset(123)


def test_subset_sampler_canonical_order():
    for seed in range(200):
        subset = sample_modality_subset(seed)
        idx = [MODALITY_SLOTS.index(s) for s in subset]
        assert idx == sorted(idx)
        assert len(set(subset)) == len(subset)


def test_subset_sampler_size_distribution():
    counts = np.zeros(6)
    n = 60000
    for seed in range(n):
        counts[len(sample_modality_subset(seed))] += 1
    freq = counts / n
    assert np.abs(freq - 1.0 / 6.0).max() < 0.01


def test_subset_sampler_marginal_inclusion_half():
    n = 60000
    hits = {s: 0 for s in MODALITY_SLOTS}
    for seed in range(n):
        for s in sample_modality_subset(seed):
            hits[s] += 1
    for s in MODALITY_SLOTS:
        assert abs(hits[s] / n - 0.5) < 0.01


# ------------------------------------------------------------ bundle


def test_bundle_empty_and_present():
    assert AuxiliaryBundle.empty().present() == ()
    K = _K()
    b = AuxiliaryBundle(k1=K, d2=DepthMap.dense(np.ones((30, 40))))
    assert b.present() == ("k1", "d2")


def test_bundle_restrict():
    K = _K()
    pose = RigidPose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    b = AuxiliaryBundle(k1=K, k2=K, p12=pose)
    r = b.restrict(("k2",))
    assert r.present() == ("k2",)
    assert r.k2 == K and r.k1 is None and r.p12 is None


def test_bundle_restrict_rejects_unknown_slot():
    with pytest.raises(ValidationError):
        AuxiliaryBundle.empty().restrict(("focal",))
