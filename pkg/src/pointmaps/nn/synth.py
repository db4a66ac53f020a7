"""Procedural two-view scenes with mutually consistent ground truth.

The surface is a smooth cosine-series depth field over image-1 pixel
coordinates, so depth, world position and normals have closed forms at
any fractional pixel.  Camera 1 sits at the world origin; camera 2 is
drawn nearby.  Its depth map comes from supersampled point splatting
with a z-buffer, which keeps all returned quantities consistent by
construction: X11 = unproject(D1, K1), X22 = unproject(D2, K2) and
X21 = P12^-1 applied to X22.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import (
    CameraIntrinsics,
    DegenerateGeometryError,
    DepthMap,
    PointMap,
    RigidPose,
    ValidationError,
    pixel_grid,
    unproject,
)
from ..stitching import CropSpec


@dataclass(frozen=True)
class PairSample:
    """One training pair: images, ground truth and the true priors.

    ``p12`` maps frame-1 coordinates into frame 2.  When the grids are
    windows of a larger generated scene, ``crop1``/``crop2`` record the
    windows and ``k1``/``k2`` already are the window intrinsics.
    """

    img1: np.ndarray
    img2: np.ndarray
    x11: PointMap
    x21: PointMap
    x22: PointMap
    d1: DepthMap
    d2: DepthMap
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    p12: RigidPose
    crop1: CropSpec | None = None
    crop2: CropSpec | None = None

    @property
    def shape(self) -> tuple:
        return self.img1.shape[:2]


class CosineDepthField:
    """Positive depth over image coordinates, evaluable anywhere."""

    def __init__(self, rng, width: int, height: int, terms: int = 10):
        self.base = rng.uniform(2.5, 3.5)
        raw = rng.uniform(0.5, 1.0, terms)
        self.amp = 0.2 * self.base * raw / raw.sum()
        cycles_u = rng.uniform(0.4, 4.0, terms) * rng.choice([-1.0, 1.0], terms)
        cycles_v = rng.uniform(0.4, 4.0, terms) * rng.choice([-1.0, 1.0], terms)
        self.fu = 2.0 * np.pi * cycles_u / width
        self.fv = 2.0 * np.pi * cycles_v / height
        self.phase = rng.uniform(0.0, 2.0 * np.pi, terms)

    def value(self, u, v):
        d = np.full(np.broadcast(u, v).shape, self.base)
        for a, fu, fv, ph in zip(self.amp, self.fu, self.fv, self.phase):
            d = d + a * np.cos(fu * u + fv * v + ph)
        return d

    def grad(self, u, v):
        """Partial derivatives (dd/du, dd/dv)."""
        du = np.zeros(np.broadcast(u, v).shape)
        dv = np.zeros_like(du)
        for a, fu, fv, ph in zip(self.amp, self.fu, self.fv, self.phase):
            s = a * np.sin(fu * u + fv * v + ph)
            du -= fu * s
            dv -= fv * s
        return du, dv


class WorldPalette:
    """Smooth RGB albedo keyed to world position."""

    def __init__(self, rng):
        self.freq = rng.uniform(1.0, 3.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, 3)

    def color(self, points):
        ang = points @ self.freq.T + self.phase
        return 0.55 + 0.35 * np.cos(ang)


class SurfaceTexture:
    """High-frequency albedo modulation attached to the surface.

    Keyed to the image-1 parameterization, so both rendered views see
    the same pattern at the same physical point.  It masks the shading
    signal, which keeps depth from being fully recoverable from RGB
    alone, without hurting cross-view consistency.
    """

    def __init__(self, rng, width: int, height: int, terms: int = 5):
        cu = rng.uniform(3.0, 9.0, (3, terms)) * rng.choice([-1.0, 1.0], (3, terms))
        cv = rng.uniform(3.0, 9.0, (3, terms)) * rng.choice([-1.0, 1.0], (3, terms))
        self.fu = 2.0 * np.pi * cu / width
        self.fv = 2.0 * np.pi * cv / height
        self.phase = rng.uniform(0.0, 2.0 * np.pi, (3, terms))

    def gain(self, u, v):
        """Multiplicative factor per channel, (..., 3), centered on 1."""
        out = np.empty(np.broadcast(u, v).shape + (3,))
        for c in range(3):
            ang = self.fu[c] * np.asarray(u)[..., None] + self.fv[c] * np.asarray(v)[..., None] + self.phase[c]
            out[..., c] = 1.0 + 1.2 * np.mean(np.cos(ang), axis=-1)
        return np.clip(out, 0.1, None)


def _random_intrinsics(rng, width: int, height: int) -> CameraIntrinsics:
    f = 1.1 * width * rng.uniform(0.7, 1.4)
    cx = width / 2 + rng.uniform(-0.04, 0.04) * width
    cy = height / 2 + rng.uniform(-0.04, 0.04) * height
    return CameraIntrinsics(fx=f, fy=f, cx=cx, cy=cy, width=width, height=height)


def _random_pose(rng, scene_scale: float) -> RigidPose:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = min(abs(rng.normal(0.0, np.deg2rad(5.0))), np.deg2rad(14.0))
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    t = rng.normal(0.0, 0.04 * scene_scale, 3)
    return RigidPose(R, t)


def _surface_points(field: CosineDepthField, K: CameraIntrinsics, u, v):
    """World positions and unit normals of the surface at image-1 coords."""
    d = field.value(u, v)
    du, dv = field.grad(u, v)
    a = (u - K.cx) / K.fx
    b = (v - K.cy) / K.fy
    points = np.stack([a * d, b * d, d], axis=-1)
    # tangents of the parameterized surface X(u, v)
    xu = np.stack([d / K.fx + a * du, b * du, du], axis=-1)
    xv = np.stack([a * dv, d / K.fy + b * dv, dv], axis=-1)
    n = np.cross(xu, xv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return points, n


def _shade(normals, light, albedo):
    lam = 0.45 + 0.55 * np.abs(normals @ light)
    return np.clip(lam[..., None] * albedo, 0.0, 1.0)


def _splat_second_view(points, colors, pose: RigidPose, K: CameraIntrinsics):
    """Z-buffered nearest-splat rendering of world points into camera 2."""
    q = pose.apply(points.reshape(-1, 3))
    c = colors.reshape(-1, 3)
    z = q[:, 2]
    keep = z > 1e-6
    q, c, z = q[keep], c[keep], z[keep]
    px = K.fx * q[:, 0] / z + K.cx
    py = K.fy * q[:, 1] / z + K.cy
    iu = np.rint(px).astype(int)
    iv = np.rint(py).astype(int)
    inside = (iu >= 0) & (iu < K.width) & (iv >= 0) & (iv < K.height)
    iu, iv, z, c = iu[inside], iv[inside], z[inside], c[inside]

    zbuf = np.full((K.height, K.width), np.inf)
    np.minimum.at(zbuf, (iv, iu), z)
    win = z <= zbuf[iv, iu]
    img = np.zeros((K.height, K.width, 3))
    img[iv[win], iu[win]] = c[win]
    mask = np.isfinite(zbuf)
    depth = np.where(mask, zbuf, 0.0)
    return DepthMap(depth, mask), img


def _try_scene(rng, height: int, width: int, supersample: int):
    k1 = _random_intrinsics(rng, width, height)
    k2 = _random_intrinsics(rng, width, height)
    field = CosineDepthField(rng, width, height)
    palette = WorldPalette(rng)
    texture = SurfaceTexture(rng, width, height)
    light = rng.standard_normal(3)
    light /= np.linalg.norm(light)
    p12 = _random_pose(rng, field.base)

    cols, rows = pixel_grid(width, height)
    d1_vals = field.value(cols, rows)
    d1 = DepthMap(d1_vals, np.ones((height, width), bool))
    x11 = unproject(d1, k1, subject=1)
    _, n1 = _surface_points(field, k1, cols, rows)
    img1 = _shade(n1, light, palette.color(x11.points) * texture.gain(cols, rows))

    s = supersample
    us = (np.arange(s * width) + 0.5) / s - 0.5
    vs = (np.arange(s * height) + 0.5) / s - 0.5
    uu, vv = np.meshgrid(us, vs)
    pts, nss = _surface_points(field, k1, uu, vv)
    colors = _shade(nss, light, palette.color(pts) * texture.gain(uu, vv))
    d2, img2 = _splat_second_view(pts, colors, p12, k2)

    x22 = unproject(d2, k2, subject=2)
    inv = p12.inverse()
    x21 = swap = PointMap(
        np.where(x22.valid[..., None], inv.apply(x22.points), 0.0),
        x22.valid.copy(),
        subject=2,
        frame=1,
    )
    sample = PairSample(img1, img2, x11, swap, x22, d1, d2, k1, k2, p12)
    return sample, d2.density()


def gen_synthetic_pair(seed: int, height: int = 64, width: int = 64,
                       min_overlap: float = 0.2, supersample: int = 3) -> PairSample:
    """Deterministic per seed; resamples scenes with too little overlap."""
    rng = np.random.default_rng(seed)
    for _ in range(64):
        sample, overlap = _try_scene(rng, height, width, supersample)
        if overlap >= min_overlap:
            return sample
    raise DegenerateGeometryError(f"no scene with {min_overlap:.0%} view overlap after 64 draws")


def _crop_pointmap(pm: PointMap, sl) -> PointMap:
    return PointMap(pm.points[sl], pm.valid[sl], subject=pm.subject, frame=pm.frame)


def _crop_depth(d: DepthMap, sl) -> DepthMap:
    return DepthMap(d.values[sl], d.mask[sl])


def _check_croppable(sample: PairSample, out_h: int, out_w: int):
    if sample.crop1 is not None or sample.crop2 is not None:
        raise ValidationError("sample is already cropped")
    h, w = sample.shape
    if out_h > h or out_w > w:
        raise ValidationError(f"crop {out_h}x{out_w} exceeds source {h}x{w}")


def _apply_crops(sample: PairSample, c1: CropSpec, c2: CropSpec) -> PairSample:
    s1, s2 = c1.slices(), c2.slices()
    return replace(
        sample,
        img1=sample.img1[s1],
        img2=sample.img2[s2],
        x11=_crop_pointmap(sample.x11, s1),
        x21=_crop_pointmap(sample.x21, s2),
        x22=_crop_pointmap(sample.x22, s2),
        d1=_crop_depth(sample.d1, s1),
        d2=_crop_depth(sample.d2, s2),
        k1=c1.intrinsics(),
        k2=c2.intrinsics(),
        crop1=c1,
        crop2=c2,
    )


def random_crop(sample: PairSample, out_h: int, out_w: int, seed: int) -> PairSample:
    """Cut independent non-centered windows out of both images.

    Ground truth grids are sliced; the intrinsics become the window
    intrinsics, whose shifted principal point keeps ray directions
    identical to the parent view.  The relative pose is unchanged.
    """
    _check_croppable(sample, out_h, out_w)
    h, w = sample.shape
    rng = np.random.default_rng(seed)
    crops = []
    for K in (sample.k1, sample.k2):
        x0 = int(rng.integers(0, w - out_w + 1))
        y0 = int(rng.integers(0, h - out_h + 1))
        crops.append(CropSpec(x0, y0, out_w, out_h, K))
    return _apply_crops(sample, *crops)


def center_crop(sample: PairSample, out_h: int, out_w: int) -> PairSample:
    """Cut the centered window of the given size out of both images."""
    _check_croppable(sample, out_h, out_w)
    h, w = sample.shape
    x0, y0 = (w - out_w) // 2, (h - out_h) // 2
    return _apply_crops(
        sample,
        CropSpec(x0, y0, out_w, out_h, sample.k1),
        CropSpec(x0, y0, out_w, out_h, sample.k2),
    )
