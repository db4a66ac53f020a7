"""Scale-invariant pointmap regression loss with confidence weighting.

The predicted and ground-truth pointmaps are divided by their mean valid
point norms before comparison, which makes the objective invariant to the
global scene scale.  Each pixel's residual is weighted by a predicted
confidence C >= 1 and balanced by -alpha*log(C), so the per-pixel optimum
is C* = alpha/residual (clamped at the lower bound 1).

All reductions here are plain numpy; a differentiable twin of the same
formulas is assembled from autodiff ops in :mod:`pointmaps.nn.train` and
is tested to agree with this reference implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ConfidenceMap, PairPrediction, PointMap, ValidationError

__all__ = [
    "LossBreakdown",
    "mean_norm",
    "znorm",
    "regression_loss",
    "confidence_loss",
    "total_loss",
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
]

DEFAULT_ALPHA = 0.2
DEFAULT_BETA = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Per-pointmap confidence-aware losses and their weighted total."""

    l11: float
    l21: float
    l22: float
    total: float
    alpha: float
    beta: float


def mean_norm(values: np.ndarray, valid: np.ndarray) -> float:
    """Mean Euclidean norm of the rows of an (..., C) array at valid entries."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValidationError("no valid entries to normalize over")
    sel = np.asarray(values, dtype=np.float64)[valid]
    return float(np.mean(np.linalg.norm(sel, axis=-1)))


def znorm(*pointmaps: PointMap, valid_override: tuple | None = None) -> float:
    """Average norm of all valid 3D points across the given pointmaps.

    ``valid_override``, when given, supplies one mask per pointmap in
    place of each map's own validity (used to evaluate predictions over
    the ground-truth valid set).
    """
    if not pointmaps:
        raise ValidationError("znorm needs at least one pointmap")
    masks = valid_override if valid_override is not None else [pm.valid for pm in pointmaps]
    if len(masks) != len(pointmaps):
        raise ValidationError("one validity mask per pointmap required")
    chunks = []
    for pm, mask in zip(pointmaps, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pm.shape:
            raise ValidationError("validity mask shape does not match pointmap")
        chunks.append(pm.points[mask])
    pts = np.concatenate(chunks, axis=0)
    if pts.size == 0:
        raise ValidationError("no valid points to normalize over")
    return float(np.mean(np.linalg.norm(pts, axis=-1)))


def regression_loss(pred: PointMap, gt: PointMap, z_pred: float, z_gt: float) -> np.ndarray:
    """Per-pixel distance between scale-normalized points.

    Returns ``norm(pred/z_pred - gt/z_gt)`` as an (H, W) grid; entries at
    gt-invalid pixels are zeroed and carry no meaning.
    """
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not (z_pred > 0 and z_gt > 0):
        raise ValidationError(f"normalizers must be positive, got {z_pred}, {z_gt}")
    diff = pred.points / z_pred - gt.points / z_gt
    out = np.linalg.norm(diff, axis=-1)
    return np.where(gt.valid, out, 0.0)


def confidence_loss(
    lreg: np.ndarray,
    conf: ConfidenceMap,
    alpha: float = DEFAULT_ALPHA,
    valid: np.ndarray | None = None,
    mean_normalized: bool = False,
) -> float:
    """Sum over valid pixels of ``C*lreg - alpha*log(C)``.

    With ``mean_normalized`` the sum is divided by the valid pixel count;
    the default follows the plain-sum objective.
    """
    lreg = np.asarray(lreg, dtype=np.float64)
    if valid is None:
        valid = np.ones(lreg.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if lreg.shape != conf.shape or valid.shape != lreg.shape:
        raise ValidationError("lreg, confidence and validity shapes must match")
    if not np.isfinite(lreg[valid]).all():
        raise ValidationError("regression residuals must be finite on the valid set")
    c = conf.values[valid]
    terms = c * lreg[valid] - alpha * np.log(c)
    total = float(np.sum(terms))
    if mean_normalized:
        total /= max(1, c.size)
    return total


def total_loss(
    pair: PairPrediction,
    gt11: PointMap,
    gt21: PointMap,
    gt22: PointMap,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    mean_normalized: bool = False,
) -> LossBreakdown:
    """Assemble the full two-view objective l11 + l21 + beta*l22.

    The frame-1 maps share one normalizer (computed over the union of
    both maps' gt-valid points); the frame-2 map gets its own.  Predicted
    normalizers are evaluated over the gt valid sets so gt-invalid
    predictions never influence the objective.
    """
    zbar1 = znorm(gt11, gt21)
    zbar2 = znorm(gt22)
    z1 = znorm(pair.x11, pair.x21, valid_override=(gt11.valid, gt21.valid))
    z2 = znorm(pair.x22, valid_override=(gt22.valid,))
    parts = []
    for pred, gt, conf, zp, zg in (
        (pair.x11, gt11, pair.c11, z1, zbar1),
        (pair.x21, gt21, pair.c21, z1, zbar1),
        (pair.x22, gt22, pair.c22, z2, zbar2),
    ):
        lreg = regression_loss(pred, gt, zp, zg)
        parts.append(confidence_loss(lreg, conf, alpha, gt.valid, mean_normalized))
    l11, l21, l22 = parts
    total = l11 + l21 + beta * l22
    if not np.isfinite(total):
        raise ValidationError("loss is not finite")
    return LossBreakdown(l11=l11, l21=l21, l22=l22, total=total, alpha=alpha, beta=beta)
