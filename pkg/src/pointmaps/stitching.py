"""Sliding-window inference over large images.

A high-resolution image is covered by overlapping crops, each processed
independently.  Per-crop predictions come back with arbitrary individual
scales, so the scales are reconciled pairwise via median depth ratios in
the overlaps and the scaled tiles are blended into one full-resolution
pointmap weighted by confidence.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DegenerateGeometryError,
    PointMap,
    ValidationError,
)

__all__ = [
    "CropSpec",
    "TilePrediction",
    "schedule_crops",
    "resolve_scales",
    "blend",
]


@dataclass(frozen=True)
class CropSpec:
    """An axis-aligned window into a parent image.

    The derived intrinsics keep the parent focal lengths and shift the
    principal point by the crop offset, so crop pixel (i, j) sees the
    same ray as parent pixel (i + x0, j + y0).
    """

    x0: int
    y0: int
    w: int
    h: int
    parent_K: CameraIntrinsics

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError("crop size must be positive")
        if (
            self.x0 < 0
            or self.y0 < 0
            or self.x0 + self.w > self.parent_K.width
            or self.y0 + self.h > self.parent_K.height
        ):
            raise ValidationError(
                f"crop {self.w}x{self.h}+{self.x0}+{self.y0} exceeds parent "
                f"{self.parent_K.width}x{self.parent_K.height}"
            )

    def intrinsics(self) -> CameraIntrinsics:
        K = self.parent_K
        return CameraIntrinsics(
            fx=K.fx, fy=K.fy, cx=K.cx - self.x0, cy=K.cy - self.y0, width=self.w, height=self.h
        )

    def slices(self) -> tuple[slice, slice]:
        """(row, col) slices addressing this crop inside a parent grid."""
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)

    def overlap_box(self, other: "CropSpec") -> tuple | None:
        """Intersection rectangle (x0, y0, x1, y1) in parent coords, or None."""
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x0 + self.w, other.x0 + other.w)
        y1 = min(self.y0 + self.h, other.y0 + other.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return x0, y0, x1, y1


@dataclass(frozen=True)
class TilePrediction:
    """A per-crop pointmap prediction awaiting scale resolution."""

    crop: CropSpec
    pointmap: PointMap
    confidence: ConfidenceMap
    scale: float | None = None

    def __post_init__(self):
        if self.pointmap.shape != (self.crop.h, self.crop.w):
            raise ValidationError(
                f"pointmap {self.pointmap.shape} does not match crop {self.crop.h}x{self.crop.w}"
            )
        if self.confidence.shape != self.pointmap.shape:
            raise ValidationError("confidence shape does not match pointmap")


def _axis_offsets(parent: int, tile: int, min_overlap: int) -> list:
    if tile > parent:
        raise ValidationError(f"tile size {tile} exceeds parent size {parent}")
    if min_overlap < 0 or min_overlap >= tile:
        raise ValidationError(f"overlap {min_overlap} must be in [0, tile size {tile})")
    if tile == parent:
        return [0]
    stride = tile - min_overlap
    offsets = list(range(0, parent - tile + 1, stride))
    if offsets[-1] != parent - tile:
        offsets.append(parent - tile)
    return offsets


def schedule_crops(parent_K: CameraIntrinsics, tile_w: int, tile_h: int, min_overlap: int) -> list:
    """Cover the parent image with overlapping tiles.

    Tiles step by (tile - min_overlap) and the last row/column is snapped
    to the image border, so adjacent tiles always overlap by at least
    ``min_overlap`` pixels.  Ordering is row-major and deterministic.
    """
    xs = _axis_offsets(parent_K.width, tile_w, min_overlap)
    ys = _axis_offsets(parent_K.height, tile_h, min_overlap)
    return [CropSpec(x, y, tile_w, tile_h, parent_K) for y in ys for x in xs]


def _edge_ratio_pixels(a: TilePrediction, b: TilePrediction):
    """Depth pairs (z_a, z_b) over jointly valid pixels of the overlap."""
    box = a.crop.overlap_box(b.crop)
    if box is None:
        return None
    x0, y0, x1, y1 = box
    sa = (slice(y0 - a.crop.y0, y1 - a.crop.y0), slice(x0 - a.crop.x0, x1 - a.crop.x0))
    sb = (slice(y0 - b.crop.y0, y1 - b.crop.y0), slice(x0 - b.crop.x0, x1 - b.crop.x0))
    za = a.pointmap.points[sa + (2,)]
    zb = b.pointmap.points[sb + (2,)]
    ok = a.pointmap.valid[sa] & b.pointmap.valid[sb] & (za > 0) & (zb > 0)
    if not ok.any():
        return None
    return za[ok], zb[ok]


def resolve_scales(tiles: list, reference: int = 0) -> list:
    """Assign one scale per tile so that overlapping depths agree.

    The reference tile gets scale 1.  Scales propagate breadth-first from
    the reference through the tile-overlap graph; at each step the new
    tile's scale is the median of (already-scaled depth / tile depth)
    over the jointly valid overlap pixels.  Neighbors are visited largest
    overlap first.  Returns new TilePredictions with scales filled in.
    """
    n = len(tiles)
    if not 0 <= reference < n:
        raise ValidationError(f"reference tile {reference} out of range [0, {n})")
    pairs = {}
    weight = np.zeros((n, n), dtype=int)
    for i in range(n):
        for j in range(i + 1, n):
            got = _edge_ratio_pixels(tiles[i], tiles[j])
            if got is not None:
                pairs[(i, j)] = got
                weight[i, j] = weight[j, i] = got[0].size
    scales = np.full(n, np.nan)
    scales[reference] = 1.0
    queue = deque([reference])
    while queue:
        i = queue.popleft()
        neighbors = [j for j in range(n) if weight[i, j] > 0 and np.isnan(scales[j])]
        neighbors.sort(key=lambda j: (-weight[i, j], j))
        for j in neighbors:
            if (i, j) in pairs:
                zi, zj = pairs[(i, j)]
            else:
                zj, zi = pairs[(j, i)]
            scales[j] = float(np.median(scales[i] * zi / zj))
            queue.append(j)
    if np.isnan(scales).any():
        missing = np.flatnonzero(np.isnan(scales)).tolist()
        raise DegenerateGeometryError(
            f"tile overlap graph is disconnected: tiles {missing} unreachable from {reference}"
        )
    return [replace(t, scale=float(s)) for t, s in zip(tiles, scales)]


def blend(tiles: list, winner_take_all: bool = False) -> tuple:
    """Fuse scaled tiles into one parent-resolution pointmap.

    Per parent pixel the output point is the confidence-weighted mean of
    the covering tiles' scaled points (weights normalized per pixel), and
    the output confidence is the max over covering tiles.  With
    ``winner_take_all`` the highest-confidence tile wins outright.
    Pixels covered by no valid tile pixel are invalid.
    """
    if not tiles:
        raise ValidationError("no tiles to blend")
    for t in tiles:
        if t.scale is None:
            raise ValidationError("blend requires resolved scales; run resolve_scales first")
    K = tiles[0].crop.parent_K
    H, W = K.height, K.width
    wsum = np.zeros((H, W))
    cmax = np.zeros((H, W))
    for t in tiles:
        sy, sx = t.crop.slices()
        w = np.where(t.pointmap.valid, t.confidence.values, 0.0)
        wsum[sy, sx] += w
        cmax[sy, sx] = np.maximum(cmax[sy, sx], w)
    valid = wsum > 0
    # second pass with per-pixel normalized weights: a pixel covered by a
    # single tile gets weight exactly 1, so passthrough is bit-exact
    acc = np.zeros((H, W, 3))
    if winner_take_all:
        best = np.zeros((H, W, 3))
        seen = np.zeros((H, W))
    for t in tiles:
        sy, sx = t.crop.slices()
        w = np.where(t.pointmap.valid, t.confidence.values, 0.0)
        pts = t.scale * t.pointmap.points
        with np.errstate(invalid="ignore", divide="ignore"):
            wn = np.where(w > 0, w / wsum[sy, sx], 0.0)
        acc[sy, sx] += wn[..., None] * pts
        if winner_take_all:
            better = w > seen[sy, sx]
            region = best[sy, sx]
            region[better] = pts[better]
            best[sy, sx] = region
            seen[sy, sx] = np.maximum(seen[sy, sx], w)
    points = best if winner_take_all else acc
    src = tiles[0].pointmap
    pm = PointMap(np.where(valid[..., None], points, 0.0), valid, subject=src.subject, frame=src.frame)
    conf = ConfidenceMap(np.where(valid, cmax, 1.0))
    return pm, conf
