"""Training machinery: batched differentiable loss, SGD, the toy loop.

The tape loss mirrors :func:`pointmaps.losses.total_loss` sample by
sample (same normalizers, same masking) but runs on tensors so the
whole network can be optimized.  Modality subsets, sparsification and
non-centered crops are drawn per pair inside :func:`train_step`, all
from one seeded generator, so a step is reproducible from its seed.
"""

from __future__ import annotations

import numpy as np

from ..conditioning import AuxiliaryBundle, sample_modality_subset, sparsify
from ..geometry import DivergenceError, ValidationError
from ..losses import DEFAULT_ALPHA, DEFAULT_BETA, LossBreakdown
from .model import AuxBatch, NetConfig, PairNet
from .synth import PairSample, center_crop, gen_synthetic_pair, random_crop
from .tape import Tensor

_SEED_CAP = 2 ** 31


def _tensor_norms(x: Tensor, eps: float) -> Tensor:
    sq = (x * x).sum(axis=-1)
    if eps:
        sq = sq + eps
    return sq.sqrt()


def tape_pair_loss(out: dict, gt11, v11, gt21, v21, gt22, v22,
                   alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                   eps: float = 0.0, mean_normalized: bool = False):
    """Confidence-aware two-view objective over a batch of predictions.

    ``out`` holds the forward tensors; ``gt*`` are (B, H, W, 3) arrays
    with boolean validity masks ``v*``.  Returns the scalar loss tensor
    and a :class:`LossBreakdown` of batch-mean components.  ``eps`` is
    added under the residual square roots to keep gradients finite when
    a residual hits exactly zero; 0 keeps the forward value identical
    to the per-pair reference within rounding.
    """
    m11, m21, m22 = (np.asarray(v, dtype=np.float64) for v in (v11, v21, v22))
    c1 = m11.sum(axis=(1, 2)) + m21.sum(axis=(1, 2))
    c2 = m22.sum(axis=(1, 2))
    if np.any(c1 == 0) or np.any(c2 == 0):
        raise ValidationError("every sample needs valid pixels in both frames")

    gt11, gt21, gt22 = (np.asarray(g, dtype=np.float64) for g in (gt11, gt21, gt22))
    zbar1 = (np.linalg.norm(gt11, axis=-1) * m11).sum(axis=(1, 2))
    zbar1 = (zbar1 + (np.linalg.norm(gt21, axis=-1) * m21).sum(axis=(1, 2))) / c1
    zbar2 = (np.linalg.norm(gt22, axis=-1) * m22).sum(axis=(1, 2)) / c2

    z1 = ((_tensor_norms(out["x11"], eps) * m11).sum(axis=(1, 2))
          + (_tensor_norms(out["x21"], eps) * m21).sum(axis=(1, 2))) * (1.0 / c1)
    z2 = (_tensor_norms(out["x22"], eps) * m22).sum(axis=(1, 2)) * (1.0 / c2)
    z1inv = (z1 ** -1.0).reshape(-1, 1, 1, 1)
    z2inv = (z2 ** -1.0).reshape(-1, 1, 1, 1)

    batch = gt11.shape[0]
    parts = []
    for pred, conf, zinv, gt, zbar, m, cnt in (
        (out["x11"], out["c11"], z1inv, gt11, zbar1, m11, c1),
        (out["x21"], out["c21"], z1inv, gt21, zbar1, m21, c1),
        (out["x22"], out["c22"], z2inv, gt22, zbar2, m22, c2),
    ):
        diff = pred * zinv - gt / zbar[:, None, None, None]
        lreg = _tensor_norms(diff, eps)
        per_pixel = (conf * lreg - conf.log() * alpha) * m
        per_sample = per_pixel.sum(axis=(1, 2))
        if mean_normalized:
            per_sample = per_sample * (1.0 / np.maximum(m.sum(axis=(1, 2)), 1.0))
        parts.append(per_sample.sum() * (1.0 / batch))
    l11, l21, l22 = parts
    total = l11 + l21 + l22 * beta
    breakdown = LossBreakdown(l11=float(l11.data), l21=float(l21.data), l22=float(l22.data),
                              total=float(total.data), alpha=alpha, beta=beta)
    return total, breakdown


class SGD:
    """Gradient descent with momentum over a parameter store.

    With ``clip`` set, the gradient is rescaled to that global L2 norm
    before entering the momentum buffer whenever it exceeds it; early
    steps of the pair loss produce norms in the thousands and would
    otherwise need a uselessly small learning rate.
    """

    def __init__(self, store, lr: float, momentum: float = 0.9, clip: float | None = None):
        if clip is not None and clip <= 0:
            raise ValidationError(f"clip norm must be positive, got {clip}")
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._vel = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> None:
        gain = 1.0
        if self.clip is not None:
            gsq = sum(float((t.grad ** 2).sum()) for t in self.store.tensors())
            norm = np.sqrt(gsq)
            if norm > self.clip:
                gain = self.clip / norm
        for name, t in self.store.items():
            v = self._vel[name]
            v *= self.momentum
            v += gain * t.grad
            t.data = t.data - self.lr * v


def build_bundle(sample: PairSample, slots, rng=None) -> AuxiliaryBundle:
    """Prior bundle for the chosen slots; depths sparsified when rng given."""
    d1 = d2 = None
    if "d1" in slots:
        d1 = sample.d1
        if rng is not None:
            d1 = sparsify(d1, float(rng.uniform(0.05, 1.0)), int(rng.integers(0, _SEED_CAP)))
    if "d2" in slots:
        d2 = sample.d2
        if rng is not None:
            d2 = sparsify(d2, float(rng.uniform(0.05, 1.0)), int(rng.integers(0, _SEED_CAP)))
    return AuxiliaryBundle(
        k1=sample.k1 if "k1" in slots else None,
        k2=sample.k2 if "k2" in slots else None,
        d1=d1,
        d2=d2,
        p12=sample.p12 if "p12" in slots else None,
    )


def _stack_gt(samples):
    gt11 = np.stack([s.x11.points for s in samples])
    v11 = np.stack([s.x11.valid for s in samples])
    gt21 = np.stack([s.x21.points for s in samples])
    v21 = np.stack([s.x21.valid for s in samples])
    gt22 = np.stack([s.x22.points for s in samples])
    v22 = np.stack([s.x22.valid for s in samples])
    return gt11, v11, gt21, v21, gt22, v22


def train_step(net: PairNet, samples, opt: SGD, seed: int,
               alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
               eps: float = 1e-18, crop_hw=None, mean_normalized: bool = False) -> LossBreakdown:
    """One optimization step over a list of :class:`PairSample`.

    Per pair, a modality subset is drawn; when ``crop_hw`` is set every
    grid is cut to that size, non-centered with 50% probability for
    intrinsics-bearing pairs and centered otherwise.  Depth priors get
    randomly sparsified.  All draws derive from ``seed``.
    """
    if not samples:
        raise ValidationError("training batch is empty")
    rng = np.random.default_rng(seed)
    prepared, bundles = [], []
    for s in samples:
        slots = sample_modality_subset(int(rng.integers(0, _SEED_CAP)))
        if crop_hw is not None and s.shape != tuple(crop_hw):
            oh, ow = crop_hw
            if ("k1" in slots or "k2" in slots) and rng.random() < 0.5:
                s = random_crop(s, oh, ow, seed=int(rng.integers(0, _SEED_CAP)))
            else:
                s = center_crop(s, oh, ow)
        bundles.append(build_bundle(s, slots, rng))
        prepared.append(s)
    h, w = prepared[0].shape
    img1 = np.stack([s.img1 for s in prepared])
    img2 = np.stack([s.img2 for s in prepared])
    aux = AuxBatch.from_bundles(bundles, h, w)

    net.zero_grad()
    out = net.forward(img1, img2, aux)
    total, breakdown = tape_pair_loss(out, *_stack_gt(prepared), alpha=alpha, beta=beta,
                                      eps=eps, mean_normalized=mean_normalized)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(
            f"non-finite loss (l11={breakdown.l11}, l21={breakdown.l21}, l22={breakdown.l22})"
        )
    total.backward()
    opt.step()
    return breakdown


def train_toy(cfg: NetConfig, steps: int, batch_size: int = 8, lr: float = 1e-3,
              seed: int = 0, pool_size: int = 64, image_size: int = 64,
              crop_margin: int = 16, out_path=None, log=None,
              eps: float = 1e-18, log_every: int = 50, clip: float = 50.0):
    """Train a fresh net on synthetic pairs.

    With ``crop_margin`` > 0 scenes are generated that much larger and
    cut down to ``image_size`` inside each step.  ``pool_size`` scenes
    are generated up front and resampled; with ``pool_size`` 0 every
    step draws a brand-new batch instead, which costs scene generation
    time but leaves nothing to memorize.  Returns the net and the
    per-step loss history.
    """
    rng = np.random.default_rng(seed)
    gen = image_size + crop_margin

    def fresh():
        return gen_synthetic_pair(int(rng.integers(0, _SEED_CAP)), height=gen, width=gen)

    pool = [fresh() for _ in range(pool_size)]
    net = PairNet(cfg)
    opt = SGD(net.params, lr, clip=clip)
    crop_hw = (image_size, image_size) if crop_margin > 0 else None
    history = []
    for step in range(steps):
        # cosine decay to ~0: late steps refine instead of re-breaking scale
        opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
        if pool:
            idx = rng.choice(pool_size, size=min(batch_size, pool_size), replace=False)
            batch = [pool[i] for i in idx]
        else:
            batch = [fresh() for _ in range(batch_size)]
        bd = train_step(net, batch, opt,
                        seed=int(rng.integers(0, _SEED_CAP)), eps=eps, crop_hw=crop_hw)
        history.append(bd.total)
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log(f"step {step:5d}  loss {bd.total:10.3f}")
    if out_path is not None:
        net.save(out_path)
    return net, history
