"""Recover cameras from predicted pointmaps.

Three estimators:

* focal length from a single own-frame pointmap, by robust alignment of
  pixel offsets with projected ray directions (Weiszfeld-style IRLS);
* scaled relative pose between the two pointmaps of image 2, by a
  closed-form confidence-weighted Procrustes fit;
* classic RANSAC PnP over 2D-3D correspondences, kept as the slower
  reference the Procrustes route is compared against.

Plus the rotation/translation angle metrics used to compare poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DegenerateGeometryError,
    PointMap,
    RigidPose,
    ValidationError,
)

__all__ = [
    "FocalEstimate",
    "ScaledPose",
    "least_squares_focal",
    "weiszfeld_focal",
    "procrustes_pose",
    "pnp_ransac_pose",
    "pose_metrics",
    "rotation_geodesic_deg",
    "translation_angle_deg",
]

_RESIDUAL_FLOOR = 1e-8


@dataclass(frozen=True)
class FocalEstimate:
    """Result of the iterative focal solver."""

    focal: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if self.converged and not self.focal > 0:
            raise ValidationError("a converged focal estimate must be positive")


@dataclass(frozen=True)
class ScaledPose:
    """Similarity transform y = scale * (R @ x + t) between two frames."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValidationError("ScaledPose rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValidationError(f"scale must be strictly positive, got {self.scale}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def rigid(self) -> RigidPose:
        """The rigid part (scale dropped)."""
        return RigidPose(self.rotation, self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T + self.translation)


def _focal_observations(pm: PointMap, principal) -> tuple:
    cx, cy = principal
    H, W = pm.shape
    cols, rows = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    ok = pm.valid & (pm.points[..., 2] > 0)
    if ok.sum() < 10:
        raise ValidationError(f"focal solver needs >= 10 valid pixels, got {int(ok.sum())}")
    z = pm.points[..., 2][ok]
    a = pm.points[..., 0][ok] / z
    b = pm.points[..., 1][ok] / z
    u = cols[ok] - cx
    v = rows[ok] - cy
    return u, v, a, b


def least_squares_focal(pm: PointMap, principal) -> float:
    """Closed-form focal minimizing the unweighted squared residual.

    Not robust: a handful of gross outliers will drag the estimate; used
    to initialize :func:`weiszfeld_focal` and as a comparison baseline.
    """
    u, v, a, b = _focal_observations(pm, principal)
    denom = np.sum(a * a + b * b)
    if denom <= 0:
        raise DegenerateGeometryError("all points lie on the principal ray")
    return float(np.sum(u * a + v * b) / denom)


def weiszfeld_focal(
    pm: PointMap, principal, max_iter: int = 50, tol: float = 1e-9
) -> FocalEstimate:
    """Robust focal via iteratively reweighted least squares.

    Minimizes ``sum_p ||(u, v) - f * (x/z, y/z)||`` (an L1-type norm over
    pixels) by reweighting each pixel with the inverse of its current
    residual, floored at 1e-8.  Starts from the closed-form least-squares
    focal; converged when the relative focal change drops below ``tol``.
    """
    u, v, a, b = _focal_observations(pm, principal)
    denom0 = np.sum(a * a + b * b)
    if denom0 <= 0:
        return FocalEstimate(focal=float("nan"), iterations=0, converged=False)
    f = float(np.sum(u * a + v * b) / denom0)
    for it in range(1, max_iter + 1):
        res = np.hypot(u - f * a, v - f * b)
        w = 1.0 / np.maximum(res, _RESIDUAL_FLOOR)
        denom = np.sum(w * (a * a + b * b))
        if denom <= 0:
            return FocalEstimate(focal=float("nan"), iterations=it, converged=False)
        f_new = float(np.sum(w * (u * a + v * b)) / denom)
        done = abs(f_new - f) <= tol * max(abs(f_new), 1e-12)
        f = f_new
        if done:
            return FocalEstimate(focal=f, iterations=it, converged=f > 0)
    return FocalEstimate(focal=f, iterations=max_iter, converged=False)


def procrustes_pose(
    x22: PointMap, x21: PointMap, c22: ConfidenceMap, c21: ConfidenceMap
) -> ScaledPose:
    """Closed-form scaled pose aligning image 2's two pointmaps.

    Finds (scale, R, t) minimizing the confidence-weighted squared error
    ``sum_p w_p * || scale * (R @ x22_p + t) - x21_p ||^2`` with weights
    ``w = sqrt(c22 * c21)`` over the jointly valid pixels.  The rotation
    comes from the SVD of the weighted cross-covariance with reflection
    correction; scale and translation then follow in closed form, so the
    result is the global optimum of the quadratic objective.
    """
    if x22.shape != x21.shape:
        raise ValidationError("the two pointmaps must share one pixel grid")
    if x22.subject != x21.subject:
        raise ValidationError("both pointmaps must depict the same image")
    ok = x22.valid & x21.valid
    if ok.sum() < 3:
        raise DegenerateGeometryError(f"need >= 3 jointly valid points, got {int(ok.sum())}")
    w = np.sqrt(c22.values[ok] * c21.values[ok])
    x = x22.points[ok]
    y = x21.points[ok]
    wsum = np.sum(w)
    mu_x = (w[:, None] * x).sum(axis=0) / wsum
    mu_y = (w[:, None] * y).sum(axis=0) / wsum
    xc = x - mu_x
    yc = y - mu_y
    cov = (w[:, None] * yc).T @ xc / wsum
    U, d, Vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("cross-covariance is rank deficient (collinear points)")
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    S = np.diag([1.0, 1.0, sign if sign != 0 else 1.0])
    R = U @ S @ Vt
    var_x = np.sum(w * np.sum(xc * xc, axis=1)) / wsum
    sigma = float(np.trace(np.diag(d) @ S) / var_x)
    if not sigma > 0:
        raise DegenerateGeometryError("recovered scale is not positive")
    # objective uses scale * (R x + t): the standard similarity translation
    # T = mu_y - sigma R mu_x corresponds to t = T / sigma
    T = mu_y - sigma * (R @ mu_x)
    return ScaledPose(rotation=R, translation=T / sigma, scale=sigma)


def _pnp_dlt(xn: np.ndarray, yn: np.ndarray, X: np.ndarray) -> RigidPose | None:
    """Direct linear solve for [R|t] from normalized pixels and 3D points."""
    n = X.shape[0]
    A = np.zeros((2 * n, 12))
    Xh = np.concatenate([X, np.ones((n, 1))], axis=1)
    A[0::2, 0:4] = -Xh
    A[0::2, 8:12] = xn[:, None] * Xh
    A[1::2, 4:8] = -Xh
    A[1::2, 8:12] = yn[:, None] * Xh
    try:
        # thin SVD: only the right singular vectors are needed, and the
        # refit step feeds in every inlier row
        _, _, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return None
    M = Vt[-1].reshape(3, 4)
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    U, d, Vt3 = np.linalg.svd(M[:, :3])
    s = d.mean()
    if s <= 1e-12:
        return None
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt3))]) @ Vt3
    t = M[:, 3] / s
    try:
        return RigidPose(R, t)
    except ValidationError:
        return None


def pnp_ransac_pose(
    pm_3d: PointMap,
    pixels: np.ndarray,
    K: CameraIntrinsics,
    iters: int = 1000,
    thresh_px: float = 2.0,
    seed: int = 0,
) -> ScaledPose:
    """RANSAC PnP: camera pose from 3D points and their observed pixels.

    ``pm_3d`` holds the 3D points (any fixed frame); ``pixels`` is the
    (H, W, 2) grid of observed (u, v) coordinates in the camera whose
    pose is sought.  Each iteration solves a 6-point minimal DLT on
    K-normalized coordinates; inliers reproject within ``thresh_px``
    pixels with positive depth.  The best model (most inliers, earliest
    iteration on ties) is refit on its inliers.  Deterministic per seed.
    Returns the world-to-camera pose with scale fixed to 1.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != pm_3d.shape + (2,):
        raise ValidationError(f"pixel grid {pixels.shape} does not match pointmap {pm_3d.shape}")
    ok = pm_3d.valid
    X = pm_3d.points[ok]
    uv = pixels[ok]
    n = X.shape[0]
    if n < 4:
        raise ValidationError(f"PnP needs >= 4 correspondences, got {n}")
    xn = (uv[:, 0] - K.cx) / K.fx
    yn = (uv[:, 1] - K.cy) / K.fy
    rng = np.random.default_rng(seed)
    best_inliers = None
    best_count = 3  # a model must beat the minimum acceptable support
    for _ in range(iters):
        if n < 6:
            break
        sample = rng.choice(n, size=6, replace=False)
        pose = _pnp_dlt(xn[sample], yn[sample], X[sample])
        if pose is None:
            continue
        cam = X @ pose.rotation.T + pose.translation
        z = cam[:, 2]
        front = z > 1e-12
        if front[sample].sum() < 4:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            du = K.fx * cam[:, 0] / z + K.cx - uv[:, 0]
            dv = K.fy * cam[:, 1] / z + K.cy - uv[:, 1]
        err = np.hypot(du, dv)
        inl = front & (err < thresh_px)
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
    if best_inliers is None:
        raise DegenerateGeometryError("no RANSAC model reached 4 inliers")
    refit = _pnp_dlt(xn[best_inliers], yn[best_inliers], X[best_inliers])
    if refit is None:
        raise DegenerateGeometryError("inlier refit failed")
    return ScaledPose(rotation=refit.rotation, translation=refit.translation, scale=1.0)


def rotation_geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    Uses atan2 of the skew and trace parts of the relative rotation,
    which stays accurate for tiny angles where arccos of the trace
    saturates.
    """
    rel = np.asarray(Ra).T @ np.asarray(Rb)
    cos = (np.trace(rel) - 1.0) / 2.0
    sin = np.linalg.norm(rel - rel.T) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(np.arctan2(sin, cos)))


def translation_angle_deg(ta: np.ndarray, tb: np.ndarray) -> float:
    """Angle between translation directions in degrees; NaN if either is zero."""
    na = np.linalg.norm(ta)
    nb = np.linalg.norm(tb)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    cos = np.dot(ta, tb) / (na * nb)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def pose_metrics(pred, gt: RigidPose) -> tuple:
    """(rotation angle, translation-direction angle) between poses, degrees.

    ``pred`` may be a ScaledPose or RigidPose; scale never enters.  The
    translation angle is NaN when either translation is exactly zero
    (direction undefined).
    """
    rra = rotation_geodesic_deg(pred.rotation, gt.rotation)
    rta = translation_angle_deg(pred.translation, gt.translation)
    return rra, rta
