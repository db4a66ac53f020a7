"""Dataset-free benchmark suites: seeded synthetic runs with artifacts.

Four suites share one report shape.  ``guiding-trend`` evaluates a
trained checkpoint over every auxiliary-modality subset on held-out
pairs; ``stitch``, ``pose`` and ``align`` exercise the oracle pipelines
under controlled noise.  Every suite writes ``report.json`` (fixed key
order), an SVG plot, and PLY clouds where a pointmap is the natural
artifact.  Suite items are independent of each other; they are run in
index order and assembled in that order, so a rerun with the same seed
reproduces every output file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np
from scipy.spatial.transform import Rotation

from .alignment import align, build_graph, extract_depth
from .conditioning import AuxiliaryBundle
from .fileio import save_pointmap_ply
from .geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DegenerateGeometryError,
    DepthMap,
    PairPrediction,
    PointMap,
    RigidPose,
    ValidationError,
    compose_relative,
    swap_frame,
    unproject,
)
from .metrics import MetricReport, depth_metrics, focal_accuracy, maa
from .nn.model import PairNet
from .nn.synth import CosineDepthField, PairSample, gen_synthetic_pair
from .nn.train import build_bundle
from .solvers import pose_metrics, procrustes_pose, weiszfeld_focal
from .stitching import TilePrediction, blend, resolve_scales, schedule_crops

SUITES = ("guiding-trend", "stitch", "pose", "align")

# Table-style subset enumeration: singles, pairs of a kind, then mixes.
SUBSET_ROWS = (
    (),
    ("k1",),
    ("k2",),
    ("k1", "k2"),
    ("d1",),
    ("d2",),
    ("d1", "d2"),
    ("p12",),
    ("k1", "k2", "d1", "d2"),
    ("k1", "k2", "p12"),
    ("d1", "d2", "p12"),
    ("k1", "k2", "d1", "d2", "p12"),
)

POSE_DEG = 2.0

_SEED_CAP = 2 ** 31
_EVAL_STREAM = 0x9E37


def held_out_samples(seed: int, count: int, image_size: int = 64) -> list:
    """Evaluation pairs decorrelated from any training pool of ``seed``.

    Training draws its scene seeds from ``default_rng(seed)`` directly;
    here the generator is keyed by (seed, eval stream) so the two
    sequences never coincide.
    """
    rng = np.random.default_rng([seed, _EVAL_STREAM])
    return [
        gen_synthetic_pair(int(rng.integers(0, _SEED_CAP)), height=image_size, width=image_size)
        for _ in range(count)
    ]


def predicted_depth(pm: PointMap) -> DepthMap:
    """Depth read off a self-frame pointmap: the z channel where positive."""
    z = pm.points[..., 2]
    mask = pm.valid & np.isfinite(z) & (z > 0)
    return DepthMap(np.where(mask, z, 0.0), mask)


def _focal_or_nan(pm: PointMap, principal) -> float:
    try:
        return weiszfeld_focal(pm, principal).focal
    except (ValidationError, DegenerateGeometryError):
        return float("nan")


def pair_report(preds: list, samples: list) -> MetricReport:
    """Score pair predictions against their generating samples.

    Depth is the first view's z channel, median-aligned (predictions are
    defined up to scale).  Focal estimates cover both cameras.  The
    relative pose comes from a confidence-weighted Procrustes fit of the
    second view's two maps and is scored at the 2 degree threshold.
    """
    if len(preds) != len(samples) or not preds:
        raise ValidationError("need one prediction per sample, at least one pair")
    rels, taus, f_hat, f_gt, angular = [], [], [], [], []
    for pred, sample in zip(preds, samples):
        rel, tau = depth_metrics(predicted_depth(pred.x11), sample.d1, align="median")
        rels.append(rel)
        taus.append(tau)
        f_hat.append(_focal_or_nan(pred.x11, (sample.k1.cx, sample.k1.cy)))
        f_gt.append(sample.k1.fx)
        f_hat.append(_focal_or_nan(pred.x22, (sample.k2.cx, sample.k2.cy)))
        f_gt.append(sample.k2.fx)
        try:
            fit = procrustes_pose(pred.x22, pred.x21, pred.c22, pred.c21)
            angular.append(pose_metrics(fit, sample.p12.inverse()))
        except (ValidationError, DegenerateGeometryError):
            angular.append((float("inf"), float("inf")))
    err = np.asarray(angular)
    rra = float(np.mean(err[:, 0] < POSE_DEG))
    rta = float(np.mean(np.where(np.isfinite(err[:, 1]), err[:, 1], np.inf) < POSE_DEG))
    return MetricReport(
        depth_rel=100.0 * float(np.mean(rels)),
        depth_tau=100.0 * float(np.mean(taus)),
        focal_acc=100.0 * focal_accuracy(np.nan_to_num(f_hat, nan=-1.0), f_gt),
        rra_at=100.0 * rra,
        rta_at=100.0 * rta,
        maa30=100.0 * maa(err),
    )


def evaluate_subset(net: PairNet, samples: list, slots) -> MetricReport:
    """Run the net over ``samples`` with only ``slots`` priors supplied."""
    preds = [
        net.infer_pair(s.img1, s.img2, build_bundle(s, slots)) for s in samples
    ]
    return pair_report(preds, samples)


# ------------------------------------------------------------------ SVG

def _svg_plot(path, series: dict, title: str, width=520, height=300) -> None:
    """Minimal polyline chart: one line per named series, shared x index."""
    pad = 46.0
    pts = [v for vals in series.values() for v in vals if np.isfinite(v)]
    lo, hi = (min(pts), max(pts)) if pts else (0.0, 1.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())
    colors = ("#1f6fb2", "#c24f2e", "#3a8c53", "#8153a8")

    def sx(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def sy(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad - 6}" y="{sy(lo):.1f}" text-anchor="end" font-size="10">{lo:.3g}</text>',
        f'<text x="{pad - 6}" y="{sy(hi):.1f}" text-anchor="end" font-size="10">{hi:.3g}</text>',
    ]
    for k, (name, vals) in enumerate(series.items()):
        color = colors[k % len(colors)]
        coords = " ".join(
            f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(vals) if np.isfinite(v)
        )
        lines.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        lines.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * k + 10}" font-size="10" fill="{color}">{name}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _report_row(slots, report: MetricReport) -> dict:
    return {"subset": list(slots), "metrics": json.loads(report.to_json())}


# --------------------------------------------------------------- suites

def _suite_guiding_trend(seed, out_dir, checkpoint, pairs):
    if checkpoint is None or not os.path.exists(str(checkpoint)):
        raise ValidationError(
            f"guiding-trend needs a trained checkpoint, none at {checkpoint!r}; "
            "create one with: pointmaps train-toy --steps 2000 --out toy.ckpt"
        )
    net = PairNet.load(checkpoint)
    samples = held_out_samples(seed, pairs)
    rows = []
    for slots in SUBSET_ROWS:
        rows.append(_report_row(slots, evaluate_subset(net, samples, slots)))
    _svg_plot(
        os.path.join(out_dir, "plot.svg"),
        {
            "depth_rel": [r["metrics"]["depth_rel"] for r in rows],
            "depth_tau": [r["metrics"]["depth_tau"] for r in rows],
            "rra": [r["metrics"]["rra_at"] for r in rows],
        },
        "metrics per modality subset",
    )
    pred = net.infer_pair(samples[0].img1, samples[0].img2, AuxiliaryBundle.empty())
    save_pointmap_ply(os.path.join(out_dir, "sample_x11.ply"), pred.x11, pred.c11)
    return rows


def _oracle_prediction(sample: PairSample, rng, noise: float) -> PairPrediction:
    """Ground-truth maps cast as a prediction, optionally perturbed."""

    def jitter(pm):
        if noise == 0.0:
            return pm
        pts = pm.points + rng.normal(0.0, noise, pm.points.shape)
        return PointMap(np.where(pm.valid[..., None], pts, 0.0), pm.valid.copy(),
                        subject=pm.subject, frame=pm.frame)

    def conf(pm):
        return ConfidenceMap(np.where(pm.valid, 1.0 + rng.uniform(0.0, 2.0, pm.shape), 1.0))

    x11 = PointMap(sample.x11.points, sample.x11.valid, subject=1, frame=1)
    x21 = jitter(PointMap(sample.x21.points, sample.x21.valid, subject=2, frame=1))
    x22 = jitter(PointMap(sample.x22.points, sample.x22.valid, subject=2, frame=2))
    return PairPrediction(x11=jitter(x11), x21=x21, x22=x22,
                          c11=conf(x11), c21=conf(x21), c22=conf(x22))


def _suite_pose(seed, out_dir, pairs):
    rng = np.random.default_rng([seed, _EVAL_STREAM, 2])
    samples = held_out_samples(seed, pairs)
    preds = [_oracle_prediction(s, rng, noise=0.01) for s in samples]
    report = pair_report(preds, samples)
    errors = []
    for pred, sample in zip(preds, samples):
        fit = procrustes_pose(pred.x22, pred.x21, pred.c22, pred.c21)
        errors.append(pose_metrics(fit, sample.p12.inverse()))
    err = np.asarray(errors)
    _svg_plot(
        os.path.join(out_dir, "plot.svg"),
        {"rot_deg": sorted(err[:, 0]), "trans_deg": sorted(err[:, 1])},
        "pose errors on noisy oracle maps (sorted)",
    )
    return [_report_row((), report)]


def _suite_stitch(seed, out_dir, pairs):
    rng = np.random.default_rng([seed, _EVAL_STREAM, 3])
    full = 96
    tile, overlap = 48, 16
    rels, taus, f_hat, f_gt, angular = [], [], [], [], []
    stitched_first = None
    for item in range(pairs):
        sample = gen_synthetic_pair(int(rng.integers(0, _SEED_CAP)), height=full, width=full)

        def tile_of(pm, crop, divisor):
            sl = crop.slices()
            conf = ConfidenceMap(1.0 + rng.uniform(0.0, 2.0, (tile, tile)))
            return TilePrediction(
                crop,
                PointMap(pm.points[sl] / divisor, pm.valid[sl], subject=pm.subject, frame=pm.frame),
                conf,
            )

        # each tile carries one unknown scale, as a pair inference would;
        # the second view's two maps share their tile's draw
        t11 = [tile_of(sample.x11, c, rng.uniform(0.5, 2.0))
               for c in schedule_crops(sample.k1, tile, tile, overlap)]
        t22, t21 = [], []
        for crop in schedule_crops(sample.k2, tile, tile, overlap):
            s = rng.uniform(0.5, 2.0)
            t22.append(tile_of(sample.x22, crop, s))
            t21.append(tile_of(sample.x21, crop, s))
        pm11, conf11 = blend(resolve_scales(t11))
        t22 = resolve_scales(t22)
        pm22, conf22 = blend(t22)
        t21 = [replace(a, scale=b.scale) for a, b in zip(t21, t22)]
        pm21, conf21 = blend(t21)

        rel, tau = depth_metrics(predicted_depth(pm11), sample.d1, align="median")
        rels.append(rel)
        taus.append(tau)
        f_hat.append(_focal_or_nan(pm11, (sample.k1.cx, sample.k1.cy)))
        f_gt.append(sample.k1.fx)
        f_hat.append(_focal_or_nan(pm22, (sample.k2.cx, sample.k2.cy)))
        f_gt.append(sample.k2.fx)
        fit = procrustes_pose(pm22, pm21, conf22, conf21)
        angular.append(pose_metrics(fit, sample.p12.inverse()))
        if stitched_first is None:
            stitched_first = (pm11, conf11)
    err = np.asarray(angular)
    report = MetricReport(
        depth_rel=100.0 * float(np.mean(rels)),
        depth_tau=100.0 * float(np.mean(taus)),
        focal_acc=100.0 * focal_accuracy(np.nan_to_num(f_hat, nan=-1.0), f_gt),
        rra_at=100.0 * float(np.mean(err[:, 0] < POSE_DEG)),
        rta_at=100.0 * float(np.mean(np.where(np.isfinite(err[:, 1]), err[:, 1], np.inf) < POSE_DEG)),
        maa30=100.0 * maa(err),
    )
    _svg_plot(os.path.join(out_dir, "plot.svg"),
              {"depth_rel": sorted(rels), "1 - tau": sorted(1.0 - t for t in taus)},
              "stitched reconstruction error per scene (sorted)")
    save_pointmap_ply(os.path.join(out_dir, "stitched_x11.ply"), *stitched_first)
    return [_report_row((), report)]


def _multiview_scene(rng, n_images: int, hw=(24, 32)):
    """Independent per-image surfaces tied together by global poses."""
    h, w = hw
    depths, intrinsics, poses = [], [], []
    for v in range(n_images):
        f = 1.2 * w * rng.uniform(0.8, 1.2)
        K = CameraIntrinsics(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)
        field = CosineDepthField(rng, w, h)
        cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        depths.append(DepthMap(field.value(cols, rows), np.ones((h, w), bool)))
        intrinsics.append(K)
        if v == 0:
            poses.append(RigidPose.identity())
        else:
            R = Rotation.from_rotvec(rng.normal(0.0, 0.2, 3)).as_matrix()
            poses.append(RigidPose(R, rng.normal(0.0, 0.8, 3)))
    return depths, intrinsics, poses


def _suite_align(seed, out_dir, pairs, iters):
    rng = np.random.default_rng([seed, _EVAL_STREAM, 4])
    n = 4
    depths, intrinsics, poses = _multiview_scene(rng, n)
    cams = [unproject(depths[v], intrinsics[v], subject=v) for v in range(n)]
    edges = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            x11 = cams[i]
            x21 = swap_frame(cams[j], compose_relative(poses[j], poses[i]), dst_frame=i)
            x22 = cams[j]

            def noisy(pm):
                pts = pm.points + rng.normal(0.0, 0.005, pm.points.shape)
                return PointMap(pts, pm.valid.copy(), subject=pm.subject, frame=pm.frame)

            def conf(pm):
                return ConfidenceMap(1.0 + rng.uniform(0.0, 2.0, pm.shape))

            pred = PairPrediction(x11=x11, x21=noisy(x21), x22=noisy(x22),
                                  c11=conf(x11), c21=conf(x21), c22=conf(x22))
            edges.append((i, j, pred))
    scene = align(build_graph(edges), iters=iters)

    rels, taus, f_hat, f_gt, angular = [], [], [], [], []
    for v in range(n):
        rel, tau = depth_metrics(extract_depth(scene, v), depths[v], align="median")
        rels.append(rel)
        taus.append(tau)
        f_hat.append(scene.focals[v])
        f_gt.append(intrinsics[v].fx)
        save_pointmap_ply(os.path.join(out_dir, f"world_{v}.ply"), scene.pointmaps[v])
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            gt = compose_relative(poses[i], poses[j])
            pred = compose_relative(scene.poses[i], scene.poses[j])
            angular.append(pose_metrics(pred, gt))
    err = np.asarray(angular)
    report = MetricReport(
        depth_rel=100.0 * float(np.mean(rels)),
        depth_tau=100.0 * float(np.mean(taus)),
        focal_acc=100.0 * focal_accuracy(np.nan_to_num(f_hat, nan=-1.0), f_gt),
        rra_at=100.0 * float(np.mean(err[:, 0] < POSE_DEG)),
        rta_at=100.0 * float(np.mean(np.where(np.isfinite(err[:, 1]), err[:, 1], np.inf) < POSE_DEG)),
        maa30=100.0 * maa(err),
    )
    _svg_plot(os.path.join(out_dir, "plot.svg"),
              {"energy": list(scene.energy_trace)}, "alignment energy trace")
    return [_report_row((), report)]


def run_benchmark(suite: str, seed: int, out_dir, checkpoint=None,
                  pairs: int = 8, align_iters: int = 300) -> dict:
    """Run one suite, write its artifacts, return the report document.

    ``report.json`` is written with a fixed key order so equal-seed runs
    are byte-identical.  ``checkpoint`` is only consulted by the
    guiding-trend suite.
    """
    if suite not in SUITES:
        raise ValidationError(f"unknown suite {suite!r}, expected one of {SUITES}")
    if pairs < 1:
        raise ValidationError(f"need at least one benchmark pair, got {pairs}")
    os.makedirs(out_dir, exist_ok=True)
    if suite == "guiding-trend":
        rows = _suite_guiding_trend(seed, out_dir, checkpoint, pairs)
    elif suite == "stitch":
        rows = _suite_stitch(seed, out_dir, pairs)
    elif suite == "pose":
        rows = _suite_pose(seed, out_dir, pairs)
    else:
        rows = _suite_align(seed, out_dir, pairs, align_iters)
    doc = {"suite": suite, "seed": int(seed), "rows": rows}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc
