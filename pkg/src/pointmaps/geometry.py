"""Pointmap, depth, intrinsics and pose algebra.

Conventions used everywhere in this package:

* Image grids are stored as numpy arrays of shape (H, W) or (H, W, C),
  indexed [row, col].  A pixel is addressed by its continuous coordinate
  (i, j) where i is the column index and j the row index, with zero
  offset (integer pixel (i, j) sits exactly at coordinate (i, j)).
* A pointmap is a per-pixel grid of 3D points together with a validity
  mask.  It is tagged with the image it depicts (``subject``) and the
  camera frame its coordinates live in (``frame``).
* Poses are world-to-camera extrinsics: ``x_cam = R @ x_world + t``.
* Invalid pixels carry the sentinel point (0, 0, 0) and are excluded
  from every reduction.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ValidationError",
    "DegenerateGeometryError",
    "DivergenceError",
    "CameraIntrinsics",
    "RigidPose",
    "DepthMap",
    "PointMap",
    "ConfidenceMap",
    "PairPrediction",
    "pixel_grid",
    "unproject",
    "project",
    "swap_frame",
    "compose_relative",
]


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DegenerateGeometryError(ValidationError):
    """Raised when the input geometry does not determine a solution."""


class DivergenceError(RuntimeError):
    """Raised when an iterative computation produced non-finite values."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths, principal point and image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K (zero skew)."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera after resizing the image by ``factor``."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform ``x' = R @ x + t`` with an orthonormality check on R."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-9:
            raise ValidationError(f"rotation is not orthonormal (|R^T R - I| = {err:.3e})")
        if np.linalg.det(R) < 0:
            raise ValidationError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidPose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return the transform equivalent to applying ``other`` first, then ``self``."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth with a binary validity mask (possibly sparse)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ValidationError(
                f"depth values {values.shape} and mask {mask.shape} must be matching 2-D grids"
            )
        sel = values[mask]
        if sel.size and not (np.isfinite(sel).all() and (sel > 0).all()):
            raise ValidationError("depth must be finite and strictly positive at valid pixels")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def dense(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def density(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class PointMap:
    """W x H grid of 3D points tagged with subject image and camera frame.

    ``subject`` is the index of the image whose pixels the grid covers;
    ``frame`` is the index of the camera whose coordinate system the
    points are expressed in (-1 denotes the world frame).
    """

    points: np.ndarray
    valid: np.ndarray
    subject: int = 0
    frame: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValidationError(f"points must be (H, W, 3), got {pts.shape}")
        if valid.shape != pts.shape[:2]:
            raise ValidationError("validity mask shape does not match the point grid")
        if valid.any() and not np.isfinite(pts[valid]).all():
            raise ValidationError("valid points must be finite")
        # canonical sentinel for invalid pixels
        pts = np.where(valid[..., None], pts, 0.0)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple:
        return self.valid.shape

    def valid_points(self) -> np.ndarray:
        """(N, 3) array of the valid points only."""
        return self.points[self.valid]

    def z(self) -> np.ndarray:
        return self.points[..., 2]


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel confidence weights, bounded below by 1 so that log C >= 0."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"confidence must be a 2-D grid, got shape {values.shape}")
        if not np.isfinite(values).all() or (values < 1.0).any():
            raise ValidationError("confidences must be finite and >= 1")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, shape: tuple, value: float = 1.0) -> "ConfidenceMap":
        return cls(np.full(shape, value, dtype=np.float64))

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class PairPrediction:
    """The three pointmaps predicted for an image pair, with confidences.

    ``x11`` depicts image 1 in camera-1 coordinates, ``x21`` image 2 in
    camera-1 coordinates and ``x22`` image 2 in its own coordinates.
    """

    x11: PointMap
    x21: PointMap
    x22: PointMap
    c11: ConfidenceMap
    c21: ConfidenceMap
    c22: ConfidenceMap

    def __post_init__(self):
        if not (self.x11.subject == self.x11.frame == self.x21.frame):
            raise ValidationError("x11 must live in its own frame, shared by x21")
        if not (self.x21.subject == self.x22.subject == self.x22.frame):
            raise ValidationError("x21 and x22 must depict the same image, x22 in its own frame")
        for pm, cm in ((self.x11, self.c11), (self.x21, self.c21), (self.x22, self.c22)):
            if pm.shape != cm.shape:
                raise ValidationError("confidence map shape does not match its pointmap")


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate grids of shape (H, W)."""
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return cols, rows


def unproject(depth: DepthMap, K: CameraIntrinsics, subject: int = 0) -> PointMap:
    """Lift a depthmap to a camera-frame pointmap.

    At pixel (i, j) with depth D the point is K^-1 @ (i*D, j*D, D), i.e.
    ((i - cx)/fx * D, (j - cy)/fy * D, D).  Invalid depth pixels produce
    invalid points.  The result is tagged with ``frame == subject``.
    """
    H, W = depth.shape
    if (W, H) != (K.width, K.height):
        raise ValidationError(
            f"depth grid {W}x{H} does not match intrinsics {K.width}x{K.height}"
        )
    cols, rows = pixel_grid(W, H)
    d = depth.values
    pts = np.stack(
        [(cols - K.cx) / K.fx * d, (rows - K.cy) / K.fy * d, d], axis=-1
    )
    return PointMap(pts, depth.mask.copy(), subject=subject, frame=subject)


def project(pm: PointMap, K: CameraIntrinsics) -> tuple[DepthMap, np.ndarray]:
    """Project a camera-frame pointmap back to depth and pixel coordinates.

    Returns the depthmap (z components) and an (H, W, 2) grid of (u, v)
    pixel coordinates.  Points with z <= 0 are marked invalid; their
    pixel coordinates are zeroed.
    """
    z = pm.points[..., 2]
    ok = pm.valid & (z > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pm.points[..., 0] / z + K.cx
        v = K.fy * pm.points[..., 1] / z + K.cy
    pix = np.stack([np.where(ok, u, 0.0), np.where(ok, v, 0.0)], axis=-1)
    depth = DepthMap(np.where(ok, z, 0.0), ok)
    return depth, pix


def swap_frame(pm: PointMap, pose: RigidPose, dst_frame: int, src_frame: int | None = None) -> PointMap:
    """Express a pointmap in another camera frame: ``x_dst = R @ x_src + t``.

    ``pose`` must map coordinates of the pointmap's current frame into
    ``dst_frame``.  When ``src_frame`` is given, a mismatch with the
    pointmap's frame tag is rejected.
    """
    if src_frame is not None and pm.frame != src_frame:
        raise ValidationError(
            f"pointmap is expressed in frame {pm.frame}, expected frame {src_frame}"
        )
    pts = pose.apply(pm.points)
    return PointMap(pts, pm.valid.copy(), subject=pm.subject, frame=dst_frame)


def compose_relative(pose_m: RigidPose, pose_k: RigidPose) -> RigidPose:
    """Relative transform taking frame-m coordinates to frame-k coordinates.

    Both arguments are world-to-camera extrinsics; the result is
    ``pose_k @ pose_m^-1``.
    """
    return pose_k.compose(pose_m.inverse())
