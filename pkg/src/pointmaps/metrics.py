"""Evaluation metrics: depth accuracy, focal accuracy, pose mAA.

Metric functions return plain fractions (rel as a ratio, accuracies in
[0, 1]); :class:`MetricReport` stores the percentage form used in
report files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, ValidationError

_ALIGN_MODES = ("none", "median")


@dataclass(frozen=True)
class MetricReport:
    """One evaluation row; every field is a percentage in [0, 100]."""

    depth_rel: float
    depth_tau: float
    focal_acc: float
    rra_at: float
    rta_at: float
    maa30: float

    def __post_init__(self):
        for name in ("depth_tau", "focal_acc", "rra_at", "rta_at", "maa30"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"{name} must be a percentage in [0, 100], got {v}")
        if self.depth_rel < 0.0:
            raise ValidationError(f"depth_rel must be nonnegative, got {self.depth_rel}")

    def to_json(self) -> str:
        """Fixed-key-order serialization; parse back with from_json."""
        pairs = [(k, getattr(self, k)) for k in
                 ("depth_rel", "depth_tau", "focal_acc", "rra_at", "rta_at", "maa30")]
        return json.dumps(dict(pairs))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        expected = {"depth_rel", "depth_tau", "focal_acc", "rra_at", "rta_at", "maa30"}
        if set(raw) != expected:
            raise ValidationError(f"report keys {sorted(raw)} do not match {sorted(expected)}")
        return cls(**raw)


def depth_metrics(pred: DepthMap, gt: DepthMap, align: str = "none") -> tuple[float, float]:
    """Absolute-relative error and inlier ratio at the 3% threshold.

    ``align='median'`` rescales pred by median(gt)/median(pred) over the
    joint valid set first, which removes any global scale difference.
    Returns (rel, tau) as plain fractions.
    """
    if align not in _ALIGN_MODES:
        raise ValidationError(f"align must be one of {_ALIGN_MODES}, got {align!r}")
    if pred.shape != gt.shape:
        raise ValidationError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    joint = pred.mask & gt.mask
    if not joint.any():
        raise ValidationError("no jointly valid pixels to evaluate")
    d_hat = pred.values[joint].astype(np.float64)
    d = gt.values[joint].astype(np.float64)
    if align == "median":
        m = np.median(d_hat)
        if m <= 0:
            raise ValidationError("median of predicted depth is not positive")
        d_hat = d_hat * (np.median(d) / m)
    rel = float(np.mean(np.abs(d_hat - d) / d))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d_hat / d, d / d_hat)
    good = np.isfinite(ratio) & (ratio < 1.03) & (d_hat > 0)
    tau = float(np.mean(good))
    return rel, tau


def focal_accuracy(preds, gts) -> float:
    """Fraction of focal estimates within the 1.5% ratio threshold."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 1:
        raise ValidationError("focal lists must be 1-D and equally long")
    if preds.size == 0:
        raise ValidationError("no focal estimates to score")
    if np.any(gts <= 0) or np.any(~np.isfinite(gts)):
        raise ValidationError("ground-truth focals must be positive and finite")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(preds / gts, gts / preds)
    good = np.isfinite(ratio) & (ratio < 1.015) & (preds > 0)
    return float(np.mean(good))


def maa(angular_errors, max_deg: int = 30) -> float:
    """Mean average accuracy over integer thresholds 1..max_deg.

    ``angular_errors`` is a sequence of (rotation_deg, translation_deg)
    pairs; a pair counts as correct at threshold t when both errors are
    below t.  NaN entries (undefined translation direction) never count.
    """
    errors = np.asarray(list(angular_errors), dtype=np.float64)
    if errors.size == 0:
        raise ValidationError("no angular errors to score")
    if errors.ndim != 2 or errors.shape[1] != 2:
        raise ValidationError(f"expected (N, 2) rotation/translation errors, got {errors.shape}")
    if np.any(errors[np.isfinite(errors)] < 0):
        raise ValidationError("angular errors must be nonnegative")
    worst = np.max(errors, axis=1)
    accs = [np.mean(worst < t) for t in range(1, max_deg + 1)]
    return float(np.mean(accs))
