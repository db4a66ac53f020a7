"""Encoding of optional camera priors for network conditioning.

A prediction may be guided by any subset of five auxiliary inputs: the
intrinsics of either camera, a (possibly sparse) depthmap for either
image, and the relative pose between the two cameras.  This module turns
each prior into the numeric form the network consumes:

* intrinsics -> a per-pixel ray grid K^-1 (i, j, 1), crop-aware;
* depth -> scale-normalized values stacked with their validity mask;
* pose -> rotation entries plus a unit-normalized translation direction.

It also owns the training-time randomization: uniform sampling of the
conditioning subset and random sparsification of depth priors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import save_raw_grid
from .geometry import (
    CameraIntrinsics,
    DegenerateGeometryError,
    DepthMap,
    RigidPose,
    ValidationError,
    pixel_grid,
)
from .losses import mean_norm
from .stitching import CropSpec

__all__ = [
    "MODALITY_SLOTS",
    "RayMap",
    "NormalizedDepthInput",
    "PoseToken",
    "AuxiliaryBundle",
    "rays_from_intrinsics",
    "normalize_depth_input",
    "sparsify",
    "encode_pose",
    "sample_modality_subset",
]

# canonical slot order for the five optional priors
MODALITY_SLOTS = ("k1", "k2", "d1", "d2", "p12")


@dataclass(frozen=True)
class RayMap:
    """Per-pixel unnormalized camera rays with z-component fixed to 1."""

    directions: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValidationError(f"ray grid must be (H, W, 3), got {d.shape}")
        if np.abs(d[..., 2] - 1.0).max() > 1e-12:
            raise ValidationError("ray z-components must be identically 1")
        object.__setattr__(self, "directions", d)

    @property
    def shape(self) -> tuple:
        return self.directions.shape[:2]

    def to_raw(self, path) -> None:
        """Debug export in the raw grid format, channels stacked row-wise.

        The written grid has height 3*H: the x, y and z channels of the
        rays appear one below the other.
        """
        H, W = self.shape
        stacked = self.directions.transpose(2, 0, 1).reshape(3 * H, W)
        save_raw_grid(path, stacked)


@dataclass(frozen=True)
class NormalizedDepthInput:
    """Depth prior divided by its mean valid value, plus the divisor."""

    dprime: np.ndarray
    mask: np.ndarray
    scale: float

    def __post_init__(self):
        d = np.asarray(self.dprime, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if d.ndim != 2 or m.shape != d.shape:
            raise ValidationError("normalized depth and mask must be matching 2-D grids")
        object.__setattr__(self, "dprime", d)
        object.__setattr__(self, "mask", m)

    def stacked(self) -> np.ndarray:
        """(H, W, 2) array: normalized depth channel then mask channel."""
        return np.stack([self.dprime, self.mask.astype(np.float64)], axis=-1)

    def restore(self) -> DepthMap:
        """Undo the normalization; valid depths come back exactly."""
        return DepthMap(np.where(self.mask, self.dprime * self.scale, 0.0), self.mask.copy())


@dataclass(frozen=True)
class PoseToken:
    """Rotation plus unit translation direction; zero translation is flagged."""

    rotation: np.ndarray
    tnorm: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.tnorm, dtype=np.float64).reshape(3)
        n = np.linalg.norm(t)
        if self.degenerate:
            if n != 0.0:
                raise ValidationError("degenerate pose token must carry a zero direction")
        elif abs(n - 1.0) > 1e-9:
            raise ValidationError(f"translation direction must be unit length, got {n}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "tnorm", t)

    def vector(self) -> np.ndarray:
        """The 12 numbers fed to the pose embedding: R row-major then tnorm."""
        return np.concatenate([self.rotation.reshape(-1), self.tnorm])


@dataclass(frozen=True)
class AuxiliaryBundle:
    """Any subset of the five optional priors; all-empty is a valid bundle."""

    k1: CameraIntrinsics | None = None
    k2: CameraIntrinsics | None = None
    d1: DepthMap | None = None
    d2: DepthMap | None = None
    p12: RigidPose | None = None

    @classmethod
    def empty(cls) -> "AuxiliaryBundle":
        return cls()

    def present(self) -> tuple:
        """Slot names of the priors actually supplied, in canonical order."""
        return tuple(s for s in MODALITY_SLOTS if getattr(self, s) is not None)

    def restrict(self, slots) -> "AuxiliaryBundle":
        """Drop every prior whose slot is not in ``slots``."""
        unknown = set(slots) - set(MODALITY_SLOTS)
        if unknown:
            raise ValidationError(f"unknown modality slots: {sorted(unknown)}")
        kept = {s: (getattr(self, s) if s in slots else None) for s in MODALITY_SLOTS}
        return AuxiliaryBundle(**kept)


def rays_from_intrinsics(K: CameraIntrinsics, crop: CropSpec | None = None) -> RayMap:
    """Ray grid K^-1 (i, j, 1) with pixel coordinates in the parent image.

    For a crop the rays are those of the crop's window into the parent
    camera, so non-centered crops produce off-axis ray grids.  The crop
    must reference the same parent intrinsics.
    """
    if crop is None:
        W, H, x0, y0 = K.width, K.height, 0, 0
    else:
        if crop.parent_K != K:
            raise ValidationError("crop was scheduled against different parent intrinsics")
        W, H, x0, y0 = crop.w, crop.h, crop.x0, crop.y0
    cols, rows = pixel_grid(W, H)
    dirs = np.stack(
        [
            (cols + x0 - K.cx) / K.fx,
            (rows + y0 - K.cy) / K.fy,
            np.ones((H, W)),
        ],
        axis=-1,
    )
    return RayMap(dirs)


def normalize_depth_input(d: DepthMap) -> NormalizedDepthInput:
    """Divide a depth prior by its mean valid value.

    The divisor is the same mean-norm statistic the loss module uses,
    applied to depth treated as 1-D points.  Invalid pixels are
    zero-filled; the mask channel carries validity.
    """
    if not d.mask.any():
        raise DegenerateGeometryError("depth prior has no valid pixels; drop the modality")
    scale = mean_norm(d.values[..., None], d.mask)
    dprime = np.where(d.mask, d.values / scale, 0.0)
    return NormalizedDepthInput(dprime=dprime, mask=d.mask.copy(), scale=scale)


def sparsify(d: DepthMap, keep_ratio: float, seed: int) -> DepthMap:
    """Keep a random subset of the valid pixels, deterministically per seed.

    The retained count is round(keep_ratio * valid count), chosen
    uniformly without replacement.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValidationError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if not d.mask.any():
        raise ValidationError("cannot sparsify a depth map with no valid pixels")
    if keep_ratio == 1.0:
        return d
    flat = np.flatnonzero(d.mask.reshape(-1))
    k = int(round(keep_ratio * flat.size))
    rng = np.random.default_rng(seed)
    kept = rng.choice(flat, size=k, replace=False)
    mask = np.zeros(d.mask.size, dtype=bool)
    mask[kept] = True
    mask = mask.reshape(d.mask.shape)
    return DepthMap(np.where(mask, d.values, 0.0), mask)


def encode_pose(p: RigidPose) -> PoseToken:
    """Strip the translation scale: keep R and the unit direction of t.

    A pose with exactly zero translation has no direction; the token is
    flagged degenerate and carries a zero vector.
    """
    n = np.linalg.norm(p.translation)
    if n == 0.0:
        return PoseToken(rotation=p.rotation.copy(), tnorm=np.zeros(3), degenerate=True)
    return PoseToken(rotation=p.rotation.copy(), tnorm=p.translation / n)


def sample_modality_subset(rng_seed: int) -> tuple:
    """Draw the conditioning subset used for one training sample.

    First the subset size m is uniform over {0, ..., 5}, then an m-subset
    of the slots is uniform.  Returns slot names in canonical order.
    """
    rng = np.random.default_rng(rng_seed)
    m = int(rng.integers(0, len(MODALITY_SLOTS) + 1))
    chosen = rng.choice(len(MODALITY_SLOTS), size=m, replace=False)
    picked = set(int(c) for c in chosen)
    return tuple(s for idx, s in enumerate(MODALITY_SLOTS) if idx in picked)
