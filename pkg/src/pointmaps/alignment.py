"""Fusing pairwise pointmap predictions into one world-frame reconstruction.

Every edge of a pair graph carries a two-view prediction whose first two maps
live in the frame of the edge's first image (the third map sits in the second
image's own frame).  Alignment places a free world pointmap on each image and
fits a per-edge similarity (rotation, translation, scale) so that the
repositioned predictions agree with those world maps at every pixel, each
residual weighted by its predicted confidence:

    E = sum_e sum_{maps in e} sum_px  C * || chi[image] - s_e * (R_e x + t_e) ||

The scale gauge keeps the product of edge scales at 1 and the returned scene
is expressed in the camera frame of image 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    ConfidenceMap,
    DegenerateGeometryError,
    DepthMap,
    DivergenceError,
    PairPrediction,
    PointMap,
    RigidPose,
    ValidationError,
)
from .solvers import procrustes_pose, weiszfeld_focal

_WORLD = -1
# Under the per-pixel sqrt.  sqrt(_NORM_EPS) ~ 1e-13 sets the residual scale
# below which the norm turns quadratic: float-noise residuals at perfectly
# fitted pixels then contribute vanishing gradients instead of full-strength
# pulls in arbitrary directions, while the energy floor of an exact fit stays
# at total_confidence * 1e-13, comfortably below the 1e-8 regime we care about.
_NORM_EPS = 1e-26
_MAX_HALVINGS = 60
_STEP_GROWTH = 1.3


@dataclass(frozen=True)
class PairGraph:
    """Connected collection of pairwise predictions over an image set."""

    n_images: int
    edges: tuple
    shapes: tuple

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass
class AlignState:
    """Free variables of the alignment energy.

    One world pointmap per image plus a similarity per edge.  ``rotations``
    is (E, 3, 3), ``translations`` (E, 3) and ``log_scales`` (E,) so the
    edge scales stay positive by construction.
    """

    chis: list
    chi_valid: list
    rotations: np.ndarray
    translations: np.ndarray
    log_scales: np.ndarray

    def copy(self) -> "AlignState":
        return AlignState(
            [c.copy() for c in self.chis],
            [v.copy() for v in self.chi_valid],
            self.rotations.copy(),
            self.translations.copy(),
            self.log_scales.copy(),
        )


@dataclass(frozen=True)
class GlobalScene:
    """World-frame reconstruction produced by :func:`align`."""

    pointmaps: tuple
    poses: tuple
    focals: tuple
    edge_scales: tuple
    edge_poses: tuple
    energy_trace: tuple

    def __post_init__(self):
        n = len(self.pointmaps)
        if not (len(self.poses) == len(self.focals) == n):
            raise ValidationError("per-image fields must have one entry per image")
        if len(self.edge_scales) != len(self.edge_poses):
            raise ValidationError("per-edge fields must have one entry per edge")
        if any(not s > 0 for s in self.edge_scales):
            raise ValidationError("edge scales must be strictly positive")
        for v, pm in enumerate(self.pointmaps):
            if pm.frame != _WORLD:
                raise ValidationError(f"pointmap {v} is not in the world frame")

    @property
    def n_images(self) -> int:
        return len(self.pointmaps)


def build_graph(pairs) -> PairGraph:
    """Validate and index a list of ``(i, j, PairPrediction)`` edges.

    Image indices must be non-negative with every image up to the largest
    index taking part in at least one edge, all maps depicting one image
    must share its pixel grid, and the undirected edge set must connect
    all images.  Edge order is preserved, so downstream results are
    deterministic in the input order.
    """
    edges = []
    for entry in pairs:
        try:
            i, j, pred = entry
        except (TypeError, ValueError):
            raise ValidationError("each edge must be an (i, j, PairPrediction) triple")
        i, j = int(i), int(j)
        if i < 0 or j < 0:
            raise ValidationError(f"image indices must be non-negative, got ({i}, {j})")
        if i == j:
            raise ValidationError(f"self-edge on image {i}")
        if not isinstance(pred, PairPrediction):
            raise ValidationError("edge payload must be a PairPrediction")
        if pred.x21.shape != pred.x22.shape:
            raise ValidationError("x21 and x22 must share the second image's pixel grid")
        edges.append((i, j, pred))
    if not edges:
        raise ValidationError("graph needs at least one edge")

    n = 1 + max(max(i, j) for i, j, _ in edges)
    shapes = [None] * n
    for i, j, pred in edges:
        for v, shape in ((i, pred.x11.shape), (j, pred.x21.shape)):
            if shapes[v] is None:
                shapes[v] = shape
            elif shapes[v] != shape:
                raise ValidationError(f"image {v} appears with grids {shapes[v]} and {shape}")

    adj = [[] for _ in range(n)]
    for i, j, _ in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = [0]
    while queue:
        v = queue.pop()
        for u in adj[v]:
            if not seen[u]:
                seen[u] = True
                queue.append(u)
    if not seen.all():
        missing = np.flatnonzero(~seen).tolist()
        raise ValidationError(f"graph is disconnected: images {missing} unreachable from image 0")
    return PairGraph(n_images=n, edges=tuple(edges), shapes=tuple(shapes))


# --- similarities represented as (scale, R, t) with apply(x) = scale * (R x + t)


def _sim_compose(a, b):
    """Similarity equivalent to applying ``b`` first, then ``a``."""
    sa, Ra, ta = a
    sb, Rb, tb = b
    return sa * sb, Ra @ Rb, Ra @ tb + ta / sb


def _sim_invert(a):
    s, R, t = a
    return 1.0 / s, R.T, -s * (R.T @ t)


def initialize(graph: PairGraph) -> AlignState:
    """Spanning-tree starting point for :func:`align`.

    Chains the closed-form pairwise similarities outward from image 0 to get
    per-edge poses and scales (normalized so the scales multiply to 1), then
    seeds each image's world pointmap from its highest-confidence map,
    filling pixels the best map misses from the remaining maps in
    confidence order.
    """
    pair_sims = []
    for _, _, pred in graph.edges:
        sp = procrustes_pose(pred.x22, pred.x21, pred.c22, pred.c21)
        pair_sims.append((sp.scale, sp.rotation, sp.translation))

    sims = [None] * graph.n_images
    sims[0] = (1.0, np.eye(3), np.zeros(3))
    while any(s is None for s in sims):
        progressed = False
        for e, (i, j, _) in enumerate(graph.edges):
            if sims[i] is not None and sims[j] is None:
                sims[j] = _sim_compose(sims[i], pair_sims[e])
                progressed = True
            elif sims[j] is not None and sims[i] is None:
                sims[i] = _sim_compose(sims[j], _sim_invert(pair_sims[e]))
                progressed = True
        if not progressed:
            raise ValidationError("graph is disconnected")

    scales = np.array([sims[i][0] for i, _, _ in graph.edges])
    gamma = float(np.exp(np.mean(np.log(scales))))
    sims = [(s / gamma, R, t) for s, R, t in sims]

    rotations = np.stack([sims[i][1] for i, _, _ in graph.edges])
    translations = np.stack([sims[i][2] for i, _, _ in graph.edges])
    log_scales = np.log(np.array([sims[i][0] for i, _, _ in graph.edges]))
    log_scales -= log_scales.mean()

    chis = [np.zeros(shape + (3,)) for shape in graph.shapes]
    valids = [np.zeros(shape, dtype=bool) for shape in graph.shapes]
    candidates = [[] for _ in range(graph.n_images)]
    for e, (i, j, pred) in enumerate(graph.edges):
        for view, (pm, cm) in enumerate(((pred.x11, pred.c11), (pred.x21, pred.c21))):
            target = (i, j)[view]
            conf = float(cm.values[pm.valid].mean()) if pm.valid.any() else -np.inf
            candidates[target].append((-conf, e, view, pm))
    for v in range(graph.n_images):
        for _, e, _, pm in sorted(candidates[v], key=lambda c: c[:3]):
            s = float(np.exp(log_scales[e]))
            world = s * (pm.points @ rotations[e].T + translations[e])
            fill = pm.valid & ~valids[v]
            chis[v][fill] = world[fill]
            valids[v] |= pm.valid
    return AlignState(chis, valids, rotations, translations, log_scales)


@dataclass
class _Term:
    """One confidence-weighted map-vs-world comparison, flattened to its valid pixels."""

    image: int
    idx: np.ndarray
    points: np.ndarray
    weights: np.ndarray


@dataclass
class _Problem:
    graph: PairGraph
    terms: list
    edge_weight: np.ndarray
    edge_xbar: np.ndarray
    edge_rho2: np.ndarray
    pixel_weight: list


def _build_problem(graph: PairGraph, chi_valid) -> _Problem:
    terms = []
    edge_weight = np.zeros(graph.n_edges)
    edge_xbar = np.zeros((graph.n_edges, 3))
    edge_rho2 = np.zeros(graph.n_edges)
    pixel_weight = [np.zeros(h * w) for h, w in graph.shapes]
    for e, (i, j, pred) in enumerate(graph.edges):
        pair_terms = []
        for image, pm, cm in ((i, pred.x11, pred.c11), (j, pred.x21, pred.c21)):
            mask = pm.valid & chi_valid[image]
            idx = np.flatnonzero(mask.ravel())
            pts = pm.points.reshape(-1, 3)[idx]
            w = cm.values.ravel()[idx]
            pair_terms.append(_Term(image, idx, pts, w))
            edge_weight[e] += w.sum()
            edge_xbar[e] += (w[:, None] * pts).sum(axis=0)
            pixel_weight[image][idx] += w
        if edge_weight[e] == 0.0:
            raise ValidationError(f"edge {e} has no valid pixels")
        edge_xbar[e] /= edge_weight[e]
        spread = sum(
            float((t.weights * ((t.points - edge_xbar[e]) ** 2).sum(axis=1)).sum())
            for t in pair_terms
        )
        edge_rho2[e] = max(spread / edge_weight[e], 1e-12)
        terms.append(pair_terms)
    return _Problem(graph, terms, edge_weight, edge_xbar, edge_rho2, pixel_weight)


def _energy(problem: _Problem, state: AlignState) -> float:
    chis = [c.reshape(-1, 3) for c in state.chis]
    scales = np.exp(state.log_scales)
    total = 0.0
    for e, pair_terms in enumerate(problem.terms):
        R, t, s = state.rotations[e], state.translations[e], scales[e]
        for term in pair_terms:
            y = s * (term.points @ R.T + t)
            d = chis[term.image][term.idx] - y
            r = np.sqrt((d * d).sum(axis=1) + _NORM_EPS)
            total += float((term.weights * r).sum())
    return total


def _direction(problem: _Problem, state: AlignState):
    """Curvature-preconditioned descent direction.

    Rotation and scale act about each edge's weighted point centroid, which
    decouples them from translation (camera-frame points sit far from the
    origin, so origin-anchored spins would mostly translate the cloud).
    The smoothed per-pixel norm has curvature proportional to w / r, so
    each block is divided by its softened inverse-residual mass (softened
    by the edge's mean residual, keeping a handful of already-perfect
    pixels from freezing a whole edge).  A unit step then moves every
    quantity by roughly its local residual scale.
    """
    chis = [c.reshape(-1, 3) for c in state.chis]
    scales = np.exp(state.log_scales)
    g_chi = [np.zeros_like(c) for c in chis]
    c_chi = [np.zeros(c.shape[0]) for c in chis]
    g_rot = np.zeros((problem.graph.n_edges, 3))
    g_tra = np.zeros((problem.graph.n_edges, 3))
    g_ls = np.zeros(problem.graph.n_edges)
    c_edge = np.zeros(problem.graph.n_edges)
    centroids = np.zeros((problem.graph.n_edges, 3))
    for e, pair_terms in enumerate(problem.terms):
        R, t, s = state.rotations[e], state.translations[e], scales[e]
        qbar = problem.edge_xbar[e] @ R.T + t
        centroids[e] = qbar
        rs, ds, vcs, ycs = [], [], [], []
        for term in pair_terms:
            vc = (term.points - problem.edge_xbar[e]) @ R.T
            y = s * (vc + qbar)
            d = chis[term.image][term.idx] - y
            r = np.sqrt((d * d).sum(axis=1) + _NORM_EPS)
            vcs.append(vc)
            ycs.append(y)
            ds.append(d)
            rs.append(r)
        rbar = sum(float((t_.weights * r).sum()) for t_, r in zip(pair_terms, rs))
        rbar = max(rbar / problem.edge_weight[e], np.sqrt(_NORM_EPS))
        for term, vc, d, r in zip(pair_terms, vcs, ds, rs):
            pull = (term.weights / r)[:, None] * d
            curv = term.weights / (r + rbar)
            g_chi[term.image][term.idx] += pull
            c_chi[term.image][term.idx] += curv
            # downstream of y the pull enters with the opposite sign
            g_tra[e] -= s * pull.sum(axis=0)
            g_ls[e] -= s * float((pull * vc).sum())
            g_rot[e] -= s * np.cross(vc, pull).sum(axis=0)
            c_edge[e] += float(curv.sum())
    d_chi = [g / np.maximum(c, 1e-30)[:, None] for g, c in zip(g_chi, c_chi)]
    denom = np.maximum(scales**2 * c_edge, 1e-30)
    d_tra = g_tra / denom[:, None]
    d_rot = g_rot / (denom * problem.edge_rho2)[:, None]
    d_ls = g_ls / (denom * problem.edge_rho2)
    d_ls = d_ls - d_ls.mean()  # keep the product of edge scales fixed
    return d_chi, d_rot, d_tra, d_ls, centroids


def _apply(state: AlignState, direction, step: float) -> AlignState:
    d_chi, d_rot, d_tra, d_ls, centroids = direction
    out = state.copy()
    for v in range(len(out.chis)):
        flat = out.chis[v].reshape(-1, 3)
        flat -= step * d_chi[v]
    spin = Rotation.from_rotvec(-step * d_rot).as_matrix()
    lam = -step * d_ls
    out.rotations = spin @ out.rotations
    # rotation and scale pivot about the edge centroid, then the plain shift
    spun = np.einsum("eab,eb->ea", spin, out.translations - centroids)
    out.translations = spun + np.exp(-lam)[:, None] * centroids - step * d_tra
    out.log_scales = out.log_scales + lam
    return out


def _chi_sweep(problem: _Problem, state: AlignState) -> AlignState:
    """One reweighted-mean sweep over the world maps, poses held fixed.

    Minimizes the standard quadratic upper bound of the smoothed norm, so
    the energy cannot increase; iterating sweeps drives each pixel to the
    weighted geometric median of its edge reprojections.
    """
    num = [np.zeros((c.shape[0] * c.shape[1], 3)) for c in state.chis]
    den = [np.zeros(c.shape[0] * c.shape[1]) for c in state.chis]
    scales = np.exp(state.log_scales)
    chis = [c.reshape(-1, 3) for c in state.chis]
    for e, pair_terms in enumerate(problem.terms):
        R, t, s = state.rotations[e], state.translations[e], scales[e]
        for term in pair_terms:
            y = s * (term.points @ R.T + t)
            d = chis[term.image][term.idx] - y
            r = np.sqrt((d * d).sum(axis=1) + _NORM_EPS)
            w = term.weights / r
            num[term.image][term.idx] += w[:, None] * y
            den[term.image][term.idx] += w
    out = state.copy()
    for v in range(len(out.chis)):
        flat = out.chis[v].reshape(-1, 3)
        covered = den[v] > 0.0
        flat[covered] = num[v][covered] / den[v][covered, None]
    return out


def _solve_chis(problem: _Problem, state: AlignState, energy: float, sweeps: int = 8):
    """Re-fit the world maps to the current poses by monotone sweeps."""
    for _ in range(sweeps):
        cand = _chi_sweep(problem, state)
        cand_energy = _energy(problem, cand)
        if not (np.isfinite(cand_energy) and cand_energy < energy):
            break
        gain = energy - cand_energy
        state, energy = cand, cand_energy
        if gain < 1e-4 * max(energy, 1e-30):
            break
    return state, energy


def _orthonormalize(rotations: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(rotations)
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, -1] *= -1.0
        R = U @ Vt
    return R


def align(graph: PairGraph, iters: int = 2000, lr: float = 1.0, init: AlignState | None = None) -> GlobalScene:
    """Jointly fit world pointmaps and per-edge similarities to all pairs.

    Each iteration first re-fits the world maps to the current edge poses
    with monotone reweighted sweeps (block descent with the natural w / r
    preconditioner), then takes one preconditioned gradient step on the
    edge similarities under a halving line search that only accepts strict
    decreases.  The recorded energy trace is therefore non-increasing.
    ``lr`` scales the trial pose step relative to the curvature-natural
    one; the step grows after clean accepts and halves on rejection.
    ``init`` overrides the spanning-tree starting point.
    """
    if iters < 0:
        raise ValidationError(f"iters must be >= 0, got {iters}")
    if not lr > 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    state = init.copy() if init is not None else initialize(graph)
    if len(state.chis) != graph.n_images or len(state.log_scales) != graph.n_edges:
        raise ValidationError("init state does not match the graph")
    problem = _build_problem(graph, state.chi_valid)
    energy = _energy(problem, state)
    if not np.isfinite(energy):
        raise DivergenceError(f"initial energy is not finite ({energy})")
    trace = [energy]
    step = lr
    for _ in range(iters):
        prev = energy
        state, energy = _solve_chis(problem, state, energy)
        d_chi, d_rot, d_tra, d_ls, centroids = _direction(problem, state)
        pose_only = ([np.zeros_like(g) for g in d_chi], d_rot, d_tra, d_ls, centroids)
        accepted = None
        trial = step
        for _ in range(_MAX_HALVINGS):
            cand = _apply(state, pose_only, trial)
            cand_energy = _energy(problem, cand)
            if np.isfinite(cand_energy) and cand_energy < energy:
                accepted = (cand, cand_energy)
                break
            trial *= 0.5
        if accepted is not None:
            state, energy = accepted
            step = min(trial * _STEP_GROWTH, 16.0 * lr)
        if not energy < prev:
            break  # nothing moved: converged or stuck at a kink
        trace.append(energy)
    state.rotations = _orthonormalize(state.rotations)
    state.log_scales = state.log_scales - state.log_scales.mean()
    return _finish(graph, state, trace)


def _camera_to_world(graph: PairGraph, state: AlignState, scales: np.ndarray):
    """Metric camera-to-world pose of each image.

    Images that lead at least one edge reuse that edge's similarity (the
    highest-confidence one); an image that only ever appears second gets its
    pose by fitting its own-frame map to its world map.
    """
    best_first = {}
    for e, (i, _, pred) in enumerate(graph.edges):
        conf = float(pred.c11.values[pred.x11.valid].mean()) if pred.x11.valid.any() else -np.inf
        key = (-conf, e)
        if i not in best_first or key < best_first[i][0]:
            best_first[i] = (key, e)

    poses = [None] * graph.n_images
    for v in range(graph.n_images):
        if v in best_first:
            e = best_first[v][1]
            poses[v] = RigidPose(state.rotations[e], scales[e] * state.translations[e])
            continue
        best = None
        for e, (_, j, pred) in enumerate(graph.edges):
            if j != v:
                continue
            m = pred.x22.valid & state.chi_valid[v]
            conf = float(pred.c22.values[m].mean()) if m.any() else -np.inf
            key = (-conf, e)
            if best is None or key < best[0]:
                best = (key, pred, m)
        _, pred, m = best
        own = PointMap(pred.x22.points, m, subject=v, frame=v)
        world = PointMap(state.chis[v], m, subject=v, frame=_WORLD)
        ones = ConfidenceMap.uniform(m.shape)
        fit = procrustes_pose(own, world, ConfidenceMap(pred.c22.values), ones)
        poses[v] = RigidPose(fit.rotation, fit.scale * fit.translation)
    return poses


def _finish(graph: PairGraph, state: AlignState, trace) -> GlobalScene:
    scales = np.exp(state.log_scales)
    cam_to_world = _camera_to_world(graph, state, scales)

    # re-express everything in the camera frame of image 0
    G = cam_to_world[0]
    Ginv = G.inverse()
    pointmaps, poses = [], []
    for v in range(graph.n_images):
        chi = np.where(state.chi_valid[v][..., None], Ginv.apply(state.chis[v]), 0.0)
        pointmaps.append(PointMap(chi, state.chi_valid[v], subject=v, frame=_WORLD))
        poses.append(cam_to_world[v].inverse().compose(G))
    edge_poses = [
        RigidPose(Ginv.rotation @ state.rotations[e], Ginv.rotation @ state.translations[e] + Ginv.translation / scales[e])
        for e in range(graph.n_edges)
    ]

    focals = []
    for v in range(graph.n_images):
        cam = poses[v].apply(pointmaps[v].points)
        good = pointmaps[v].valid & (cam[..., 2] > 0)
        h, w = graph.shapes[v]
        try:
            est = weiszfeld_focal(PointMap(cam, good, subject=v, frame=v), (w / 2.0, h / 2.0))
            focals.append(float(est.focal))
        except (DegenerateGeometryError, ValidationError):
            focals.append(float("nan"))

    return GlobalScene(
        pointmaps=tuple(pointmaps),
        poses=tuple(poses),
        focals=tuple(focals),
        edge_scales=tuple(float(s) for s in scales),
        edge_poses=tuple(edge_poses),
        energy_trace=tuple(trace),
    )


def extract_depth(scene: GlobalScene, index: int) -> DepthMap:
    """Per-pixel depth of one image: z of its world pointmap in camera coordinates.

    Pixels invalid in the world map, or landing at non-positive camera
    depth, come out masked.
    """
    if not 0 <= index < scene.n_images:
        raise ValidationError(f"image index {index} out of range for {scene.n_images} images")
    pm = scene.pointmaps[index]
    cam = scene.poses[index].apply(pm.points)
    z = cam[..., 2]
    mask = pm.valid & (z > 0)
    return DepthMap(np.where(mask, z, 0.0), mask)
