"""Tests for the procedural two-view scene generator."""

import numpy as np
import pytest

from pointmaps.geometry import ValidationError, swap_frame, unproject
from pointmaps.nn.synth import CosineDepthField, gen_synthetic_pair, random_crop


def test_ground_truth_mutually_consistent():
    s = gen_synthetic_pair(0)
    back = swap_frame(s.x22, s.p12.inverse(), dst_frame=1)
    err = np.abs(back.points[s.x22.valid] - s.x21.points[s.x22.valid]).max()
    assert err < 1e-9
    up = unproject(s.d1, s.k1, subject=1)
    np.testing.assert_allclose(up.points, s.x11.points, atol=1e-9)
    up2 = unproject(s.d2, s.k2, subject=2)
    np.testing.assert_allclose(up2.points, s.x22.points, atol=1e-9)


def test_same_seed_bit_identical():
    a = gen_synthetic_pair(21)
    b = gen_synthetic_pair(21)
    assert np.array_equal(a.img1, b.img1)
    assert np.array_equal(a.img2, b.img2)
    assert np.array_equal(a.x21.points, b.x21.points)
    assert np.array_equal(a.p12.rotation, b.p12.rotation)
    c = gen_synthetic_pair(22)
    assert not np.array_equal(a.img1, c.img1)


def test_shapes_and_ranges():
    s = gen_synthetic_pair(1, height=32, width=48)
    assert s.img1.shape == (32, 48, 3)
    assert s.img2.shape == (32, 48, 3)
    assert s.x11.points.shape == (32, 48, 3)
    assert s.img1.min() >= 0.0 and s.img1.max() <= 1.0
    assert np.all(s.d1.values > 0)
    assert s.d1.mask.all()


def test_overlap_floor_respected():
    for seed in range(15):
        s = gen_synthetic_pair(seed)
        assert s.d2.density() >= 0.2


def test_depth_field_fractional_evaluation():
    rng = np.random.default_rng(5)
    field = CosineDepthField(rng, 64, 64)
    # closed form must agree with itself across array and scalar calls
    assert field.value(3.25, 7.5) == pytest.approx(float(field.value(np.array([3.25]), np.array([7.5]))[0]))
    # central difference of the analytic value matches the analytic gradient
    eps = 1e-6
    du, dv = field.grad(10.3, 20.7)
    num_u = (field.value(10.3 + eps, 20.7) - field.value(10.3 - eps, 20.7)) / (2 * eps)
    num_v = (field.value(10.3, 20.7 + eps) - field.value(10.3, 20.7 - eps)) / (2 * eps)
    assert du == pytest.approx(num_u, rel=1e-6)
    assert dv == pytest.approx(num_v, rel=1e-6)


def test_random_crop_consistency():
    s = gen_synthetic_pair(2)
    c = random_crop(s, 32, 32, seed=11)
    assert c.img1.shape == (32, 32, 3)
    assert c.crop1 is not None and c.crop2 is not None
    sl1, sl2 = c.crop1.slices(), c.crop2.slices()
    np.testing.assert_array_equal(c.img1, s.img1[sl1])
    np.testing.assert_array_equal(c.x22.points, s.x22.points[sl2])
    # window intrinsics still unproject the cropped depth onto the surface
    up = unproject(c.d1, c.k1, subject=1)
    np.testing.assert_allclose(up.points, c.x11.points, atol=1e-9)
    assert c.k1.cx == s.k1.cx - c.crop1.x0
    assert c.p12 is s.p12
    with pytest.raises(ValidationError):
        random_crop(c, 16, 16, seed=0)
    with pytest.raises(ValidationError):
        random_crop(s, 128, 128, seed=0)


def test_crop_determinism():
    s = gen_synthetic_pair(2)
    a = random_crop(s, 24, 24, seed=7)
    b = random_crop(s, 24, 24, seed=7)
    assert (a.crop1.x0, a.crop1.y0) == (b.crop1.x0, b.crop1.y0)
    assert np.array_equal(a.img2, b.img2)
