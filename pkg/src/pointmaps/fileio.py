"""Serialization: PLY point clouds, raw depth grids, camera JSON, checkpoints.

Formats:

* Pointmaps go to binary little-endian PLY with per-vertex x/y/z/confidence
  float32 properties.  The grid layout (width, height, subject, frame) is
  recorded in header comments so the grid can be restored on load.  Invalid
  pixels are written with confidence 0 (valid confidences are always >= 1).
* Depth grids go to a raw file with an 8-byte header (uint32 width, uint32
  height, little-endian) followed by row-major float32 values, plus a
  sidecar ``<path>.mask`` file with the same header and uint8 payload.
* Intrinsics and poses go to small JSON documents; rotations are stored as
  9 floats row-major.
* Network checkpoints are a versioned binary blob: magic, format version, a
  JSON configuration header, then name-prefixed little-endian float32
  tensors.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DepthMap,
    PointMap,
    RigidPose,
    ValidationError,
)

__all__ = [
    "save_pointmap_ply",
    "load_pointmap_ply",
    "save_depth_raw",
    "load_depth_raw",
    "save_raw_grid",
    "load_raw_grid",
    "save_intrinsics_json",
    "load_intrinsics_json",
    "save_pose_json",
    "load_pose_json",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


# ------------------------------------------------------------------- PLY

_PLY_HEADER = """ply
format binary_little_endian 1.0
comment grid width {width}
comment grid height {height}
comment subject {subject}
comment frame {frame}
element vertex {count}
property float x
property float y
property float z
property float confidence
end_header
"""


def save_pointmap_ply(path, pm: PointMap, conf: ConfidenceMap | None = None) -> None:
    """Write a pointmap (and optional confidences) as binary PLY.

    Vertices are emitted in row-major grid order.  Invalid pixels get
    confidence 0, which is unambiguous because valid confidences are >= 1.
    """
    H, W = pm.shape
    if conf is not None and conf.shape != pm.shape:
        raise ValidationError("confidence map shape does not match the pointmap")
    cvals = conf.values if conf is not None else np.ones((H, W))
    header = _PLY_HEADER.format(
        width=W, height=H, subject=pm.subject, frame=pm.frame, count=H * W
    )
    data = np.empty((H * W, 4), dtype="<f4")
    data[:, :3] = pm.points.reshape(-1, 3)
    data[:, 3] = np.where(pm.valid, cvals, 0.0).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def load_pointmap_ply(path) -> tuple[PointMap, ConfidenceMap]:
    """Read a pointmap PLY written by :func:`save_pointmap_ply`.

    Invalid pixels (stored confidence 0) come back with the neutral
    confidence 1; they are excluded from reductions via the validity mask.
    """
    with open(path, "rb") as fh:
        meta = {}
        count = None
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end_header":
                break
            if not line:
                raise ValidationError(f"{path}: truncated PLY header")
            parts = line.split()
            if parts[0] == "comment" and len(parts) == 4:
                meta[f"{parts[1]} {parts[2]}"] = parts[3]
            elif parts[0] == "comment" and len(parts) == 3:
                meta[parts[1]] = parts[2]
            elif parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts[0] == "format" and parts[1] != "binary_little_endian":
                raise ValidationError(f"{path}: unsupported PLY format {parts[1]}")
        try:
            W = int(meta["grid width"])
            H = int(meta["grid height"])
        except KeyError:
            raise ValidationError(f"{path}: PLY lacks grid dimension comments") from None
        subject = int(meta.get("subject", 0))
        frame = int(meta.get("frame", 0))
        if count != W * H:
            raise ValidationError(f"{path}: vertex count {count} != {W}x{H}")
        raw = fh.read(count * 16)
    if len(raw) != count * 16:
        raise ValidationError(f"{path}: truncated PLY payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(H, W, 4).astype(np.float64)
    valid = data[..., 3] > 0
    pm = PointMap(data[..., :3], valid, subject=subject, frame=frame)
    conf = ConfidenceMap(np.where(valid, data[..., 3], 1.0))
    return pm, conf


# ------------------------------------------------------------ raw depth

def save_raw_grid(path, values: np.ndarray) -> None:
    """Write a 2-D float grid: uint32 width, uint32 height, float32 data."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"raw grid must be 2-D, got shape {values.shape}")
    H, W = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", W, H))
        fh.write(values.astype("<f4").tobytes())


def load_raw_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValidationError(f"{path}: truncated raw header")
        W, H = struct.unpack("<II", head)
        raw = fh.read(W * H * 4)
    if len(raw) != W * H * 4:
        raise ValidationError(f"{path}: truncated raw payload")
    return np.frombuffer(raw, dtype="<f4").reshape(H, W).astype(np.float64)


def save_depth_raw(path, depth: DepthMap) -> None:
    """Write depth values plus a ``<path>.mask`` sidecar (uint8 payload)."""
    save_raw_grid(path, depth.values)
    H, W = depth.shape
    with open(str(path) + ".mask", "wb") as fh:
        fh.write(struct.pack("<II", W, H))
        fh.write(depth.mask.astype(np.uint8).tobytes())


def load_depth_raw(path) -> DepthMap:
    values = load_raw_grid(path)
    with open(str(path) + ".mask", "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValidationError(f"{path}.mask: truncated raw header")
        W, H = struct.unpack("<II", head)
        raw = fh.read(W * H)
    if (H, W) != values.shape or len(raw) != W * H:
        raise ValidationError(f"{path}.mask: mask does not match depth grid")
    mask = np.frombuffer(raw, dtype=np.uint8).reshape(H, W).astype(bool)
    return DepthMap(np.where(mask, values, 0.0), mask)


# ---------------------------------------------------------- camera JSON

def save_intrinsics_json(path, K: CameraIntrinsics) -> None:
    doc = {
        "fx": K.fx,
        "fy": K.fy,
        "cx": K.cx,
        "cy": K.cy,
        "width": K.width,
        "height": K.height,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_intrinsics_json(path) -> CameraIntrinsics:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return CameraIntrinsics(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )
    except KeyError as exc:
        raise ValidationError(f"{path}: missing intrinsics field {exc}") from None


def save_pose_json(path, pose: RigidPose) -> None:
    doc = {
        "R": [float(v) for v in pose.rotation.reshape(-1)],
        "t": [float(v) for v in pose.translation],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_pose_json(path) -> RigidPose:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        R = np.asarray(doc["R"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(doc["t"], dtype=np.float64)
    except KeyError as exc:
        raise ValidationError(f"{path}: missing pose field {exc}") from None
    return RigidPose(R, t)


# ----------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PMTN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    """Write named float tensors plus a JSON config header.

    Layout: magic, uint32 version, uint32 header length + JSON, uint32
    tensor count, then per tensor: uint32 name length + name, uint32 ndim,
    ndim uint32 dims, row-major float32 data.  Tensor order follows dict
    insertion order and round-trips through :func:`load_checkpoint`.
    """
    header = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (config, tensors) with float64 arrays."""

    def need(fh, n, what):
        raw = fh.read(n)
        if len(raw) != n:
            raise ValidationError(f"{path}: truncated checkpoint ({what})")
        return raw

    with open(path, "rb") as fh:
        if need(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", need(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", need(fh, 4, "header length"))
        config = json.loads(need(fh, hlen, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", need(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", need(fh, 4, "name length"))
            name = need(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", need(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", need(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            raw = need(fh, size * 4, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return config, tensors
