"""Command-line surface binding the library modules.

Subcommands: gen-scenes, train-toy, infer, stitch, align, eval.  All
randomness is controlled by ``--seed`` flags; the only environment
variable consulted is ``POINTMAPS_THREADS`` (BLAS thread count).  Exit
codes: 0 on success, 2 on invalid input, 3 on numeric divergence.

Images travel as ``.npy`` arrays (H, W, 3) in [0, 1], or as anything
Pillow can open; depths, poses, intrinsics and pointmaps use the
fileio formats, so artifacts flow between subcommands: gen-scenes
output feeds infer and stitch, infer output feeds an align manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .alignment import align, build_graph
from .benchmarks import run_benchmark
from .conditioning import AuxiliaryBundle
from .fileio import (
    load_depth_raw,
    load_intrinsics_json,
    load_pointmap_ply,
    load_pose_json,
    save_depth_raw,
    save_intrinsics_json,
    save_pointmap_ply,
    save_pose_json,
)
from .geometry import DepthMap, DivergenceError, PairPrediction, ValidationError
from .nn.model import NetConfig, PairNet
from .nn.synth import gen_synthetic_pair
from .nn.train import train_toy
from .stitching import TilePrediction, blend, resolve_scales, schedule_crops

_THREAD_VAR = "POINTMAPS_THREADS"


def _apply_thread_env() -> None:
    raw = os.environ.get(_THREAD_VAR)
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{_THREAD_VAR} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{_THREAD_VAR} must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_image(path) -> np.ndarray:
    try:
        if str(path).endswith(".npy"):
            img = np.load(path)
        else:
            from PIL import Image

            with Image.open(path) as handle:
                img = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{path}: cannot read image ({exc})") from None
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"{path}: image must be (H, W, 3), got {img.shape}")
    return np.asarray(img, dtype=np.float64)


def _parse_tile(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValidationError(f"tile must look like WxH, got {text!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValidationError(f"tile must look like WxH, got {text!r}") from None
    return w, h


# ------------------------------------------------------------- commands

def cmd_gen_scenes(args) -> int:
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        scene_seed = int(rng.integers(0, 2 ** 31))
        sample = gen_synthetic_pair(scene_seed, height=args.size, width=args.size)
        d = os.path.join(args.out, f"scene_{i:03d}")
        os.makedirs(d, exist_ok=True)
        np.save(os.path.join(d, "img1.npy"), sample.img1)
        np.save(os.path.join(d, "img2.npy"), sample.img2)
        save_depth_raw(os.path.join(d, "d1.raw"), sample.d1)
        save_depth_raw(os.path.join(d, "d2.raw"), sample.d2)
        save_intrinsics_json(os.path.join(d, "k1.json"), sample.k1)
        save_intrinsics_json(os.path.join(d, "k2.json"), sample.k2)
        save_pose_json(os.path.join(d, "pose.json"), sample.p12)
        save_pointmap_ply(os.path.join(d, "x11.ply"), sample.x11)
        save_pointmap_ply(os.path.join(d, "x21.ply"), sample.x21)
        save_pointmap_ply(os.path.join(d, "x22.ply"), sample.x22)
        print(f"{d}  seed {scene_seed}")
    return 0


def cmd_train_toy(args) -> int:
    cfg = NetConfig(variant=args.variant, seed=args.seed)
    net, history = train_toy(
        cfg,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        image_size=args.image_size,
        out_path=args.out,
        log=print,
    )
    print(f"saved {args.out}  ({net.parameter_count} parameters, "
          f"final loss {history[-1]:.3f})")
    return 0


def _bundle_from_flags(args) -> AuxiliaryBundle:
    return AuxiliaryBundle(
        k1=load_intrinsics_json(args.k1) if args.k1 else None,
        k2=load_intrinsics_json(args.k2) if args.k2 else None,
        d1=load_depth_raw(args.d1) if args.d1 else None,
        d2=load_depth_raw(args.d2) if args.d2 else None,
        p12=load_pose_json(args.pose) if args.pose else None,
    )


def cmd_infer(args) -> int:
    net = PairNet.load(args.ckpt)
    img1 = _load_image(args.img1)
    img2 = _load_image(args.img2)
    pred = net.infer_pair(img1, img2, _bundle_from_flags(args))
    os.makedirs(args.out, exist_ok=True)
    save_pointmap_ply(os.path.join(args.out, "x11.ply"), pred.x11, pred.c11)
    save_pointmap_ply(os.path.join(args.out, "x21.ply"), pred.x21, pred.c21)
    save_pointmap_ply(os.path.join(args.out, "x22.ply"), pred.x22, pred.c22)
    print(f"wrote x11/x21/x22 PLY to {args.out}")
    return 0


def cmd_stitch(args) -> int:
    net = PairNet.load(args.ckpt)
    tile_w, tile_h = _parse_tile(args.tile)
    patch = net.cfg.patch_size
    if tile_w % patch or tile_h % patch:
        raise ValidationError(f"tile {tile_w}x{tile_h} not divisible by patch size {patch}")
    img1 = _load_image(os.path.join(args.scene, "img1.npy"))
    img2 = _load_image(os.path.join(args.scene, "img2.npy"))
    k1 = load_intrinsics_json(os.path.join(args.scene, "k1.json"))
    k2 = load_intrinsics_json(os.path.join(args.scene, "k2.json"))
    crops1 = schedule_crops(k1, tile_w, tile_h, args.overlap)
    crops2 = schedule_crops(k2, tile_w, tile_h, args.overlap)
    tiles = []
    for c1, c2 in zip(crops1, crops2):
        pred = net.infer_pair(img1[c1.slices()], img2[c2.slices()],
                              AuxiliaryBundle(k1=c1.intrinsics(), k2=c2.intrinsics()))
        tiles.append(TilePrediction(c1, pred.x11, pred.c11))
    tiles = resolve_scales(tiles, reference=args.ref_tile)
    pm, conf = blend(tiles)
    os.makedirs(args.out, exist_ok=True)
    save_pointmap_ply(os.path.join(args.out, "stitched_x11.ply"), pm, conf)
    z = pm.points[..., 2]
    mask = pm.valid & (z > 0)
    save_depth_raw(os.path.join(args.out, "stitched_d1.raw"),
                   DepthMap(np.where(mask, z, 0.0), mask))
    print(f"stitched {len(tiles)} tiles -> {args.out}")
    return 0


def _load_manifest(path) -> list:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read manifest: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "edges" not in doc:
        raise ValidationError(f"{path}: manifest must be an object with an 'edges' list")
    base = os.path.dirname(os.path.abspath(path))
    edges = []
    for k, entry in enumerate(doc["edges"]):
        try:
            i, j = int(entry["i"]), int(entry["j"])
            maps = {key: entry[key] for key in ("x11", "x21", "x22")}
        except (KeyError, TypeError, ValueError):
            raise ValidationError(
                f"{path}: edge {k} needs keys i, j, x11, x21, x22"
            ) from None
        loaded = {}
        for key, rel in maps.items():
            pm, conf = load_pointmap_ply(os.path.join(base, rel))
            loaded[key] = (pm, conf)
        pred = PairPrediction(
            x11=loaded["x11"][0], x21=loaded["x21"][0], x22=loaded["x22"][0],
            c11=loaded["x11"][1], c21=loaded["x21"][1], c22=loaded["x22"][1],
        )
        edges.append((i, j, pred))
    return edges


def cmd_align(args) -> int:
    graph = build_graph(_load_manifest(args.pairs))
    scene = align(graph, iters=args.iters)
    os.makedirs(args.out, exist_ok=True)
    for v in range(scene.n_images):
        save_pointmap_ply(os.path.join(args.out, f"world_{v}.ply"), scene.pointmaps[v])
        save_pose_json(os.path.join(args.out, f"pose_{v}.json"), scene.poses[v])
    doc = {
        "poses": [
            {"R": [float(x) for x in p.rotation.reshape(-1)],
             "t": [float(x) for x in p.translation]}
            for p in scene.poses
        ],
        "focals": [float(f) for f in scene.focals],
        "edge_scales": [float(s) for s in scene.edge_scales],
        "final_energy": float(scene.energy_trace[-1]),
    }
    with open(os.path.join(args.out, "poses.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"aligned {scene.n_images} images in {len(scene.energy_trace) - 1} iterations, "
          f"final energy {scene.energy_trace[-1]:.3e}")
    return 0


def cmd_eval(args) -> int:
    doc = run_benchmark(args.suite, seed=args.seed, out_dir=args.out,
                        checkpoint=args.ckpt, pairs=args.pairs,
                        align_iters=args.iters)
    for row in doc["rows"]:
        slots = ",".join(row["subset"]) or "none"
        m = row["metrics"]
        print(f"{slots:24s} rel {m['depth_rel']:7.3f}  tau {m['depth_tau']:7.3f}  "
              f"focal {m['focal_acc']:7.3f}  rra {m['rra_at']:7.3f}  "
              f"rta {m['rta_at']:7.3f}  maa {m['maa30']:7.3f}")
    print(f"report: {os.path.join(args.out, 'report.json')}")
    return 0


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointmaps",
        description="pointmap two-view reconstruction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="write synthetic scene folders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train-toy", help="train the pair network on synthetic scenes")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--variant", default="inject1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run one pair through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--k1", help="intrinsics JSON for image 1")
    p.add_argument("--k2", help="intrinsics JSON for image 2")
    p.add_argument("--d1", help="raw depth prior for image 1")
    p.add_argument("--d2", help="raw depth prior for image 2")
    p.add_argument("--pose", help="relative pose JSON (frame 1 -> 2)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("stitch", help="tiled inference over a full-resolution scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="a gen-scenes output folder")
    p.add_argument("--tile", default="64x64", help="tile size WxH")
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--ref-tile", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("align", help="fuse pairwise predictions into one frame")
    p.add_argument("--pairs", required=True, help="manifest JSON listing edge PLY triples")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="run a synthetic benchmark suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt", help="checkpoint for suites that need the net")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--iters", type=int, default=300, help="align suite iterations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_env()
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
