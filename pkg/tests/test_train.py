"""Training loop behavior: loss parity, optimizer, reproducibility."""

import numpy as np
import pytest

from pointmaps.geometry import (
    ConfidenceMap,
    DivergenceError,
    PairPrediction,
    PointMap,
    ValidationError,
)
from pointmaps.losses import total_loss
from pointmaps.nn.model import NetConfig, PairNet
from pointmaps.nn.synth import gen_synthetic_pair
from pointmaps.nn.tape import Tensor
from pointmaps.nn.train import SGD, build_bundle, tape_pair_loss, train_step, train_toy


def _tiny_cfg(**kw):
    kw.setdefault("patch_size", 4)
    kw.setdefault("dim", 8)
    kw.setdefault("enc_blocks", 1)
    kw.setdefault("dec_blocks", 1)
    kw.setdefault("heads", 2)
    return NetConfig(**kw)


def _gt_arrays(sample):
    maps = (sample.x11, sample.x21, sample.x22)
    return tuple(a for m in maps for a in (m.points[None], m.valid[None]))


def _as_prediction(out):
    full = np.ones(out["x11"].data.shape[1:3], dtype=bool)

    def pm(key, subject, frame):
        return PointMap(out[key].data[0], full.copy(), subject=subject, frame=frame)

    return PairPrediction(
        x11=pm("x11", 1, 1), x21=pm("x21", 2, 1), x22=pm("x22", 2, 2),
        c11=ConfidenceMap(out["c11"].data[0]), c21=ConfidenceMap(out["c21"].data[0]),
        c22=ConfidenceMap(out["c22"].data[0]),
    )


def test_tape_loss_matches_reference_loss():
    # batch of one, eps 0: the tensor objective must equal the numpy one
    sample = gen_synthetic_pair(31, height=16, width=16)
    net = PairNet(_tiny_cfg(seed=2))
    with Tensor.no_grad():
        out = net.forward(sample.img1[None], sample.img2[None])
    total, bd = tape_pair_loss(out, *_gt_arrays(sample), eps=0.0)
    ref = total_loss(_as_prediction(out), sample.x11, sample.x21, sample.x22)
    assert bd.total == pytest.approx(ref.total, rel=1e-12)
    assert bd.l11 == pytest.approx(ref.l11, rel=1e-12)
    assert bd.l21 == pytest.approx(ref.l21, rel=1e-12)
    assert bd.l22 == pytest.approx(ref.l22, rel=1e-12)


def test_tape_loss_gradient_matches_finite_differences():
    sample = gen_synthetic_pair(32, height=8, width=8)
    net = PairNet(_tiny_cfg(seed=3))
    gt = _gt_arrays(sample)

    def value():
        with Tensor.no_grad():
            out = net.forward(sample.img1[None], sample.img2[None])
            return tape_pair_loss(out, *gt, eps=1e-18)[1].total

    net.zero_grad()
    total, _ = tape_pair_loss(net.forward(sample.img1[None], sample.img2[None]), *gt, eps=1e-18)
    total.backward()
    for name in ("head1.w", "head2.b", "enc.patch.w", "dec2.cls"):
        t = net.params[name]
        idx = np.unravel_index(np.argmax(np.abs(t.grad)), t.grad.shape)
        old = t.data[idx]
        eps = 1e-6 * max(1.0, abs(old))
        t.data[idx] = old + eps
        hi = value()
        t.data[idx] = old - eps
        lo = value()
        t.data[idx] = old
        assert t.grad[idx] == pytest.approx((hi - lo) / (2 * eps), rel=2e-4), name


def test_tape_loss_rejects_empty_valid_set():
    sample = gen_synthetic_pair(33, height=8, width=8)
    net = PairNet(_tiny_cfg(seed=1))
    with Tensor.no_grad():
        out = net.forward(sample.img1[None], sample.img2[None])
    gt11, v11, gt21, v21, gt22, v22 = _gt_arrays(sample)
    with pytest.raises(ValidationError):
        tape_pair_loss(out, gt11, np.zeros_like(v11), gt21, np.zeros_like(v21), gt22, v22)


def test_sgd_lr_zero_is_identity():
    net = PairNet(_tiny_cfg(seed=4))
    before = net.params.arrays()
    sample = gen_synthetic_pair(34, height=16, width=16)
    opt = SGD(net.params, lr=0.0)
    train_step(net, [sample], opt, seed=0)
    after = net.params.arrays()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])


def test_sgd_clip_rescales_large_gradients():
    net = PairNet(_tiny_cfg(seed=5))
    for t in net.params.tensors():
        t.grad[...] = 0.0
    g = net.params["head1.w"]
    g.grad[...] = 3.0  # global norm far above the clip
    norm = np.sqrt(float((g.grad ** 2).sum()))
    opt = SGD(net.params, lr=1.0, momentum=0.0, clip=1.0)
    before = g.data.copy()
    opt.step()
    step = before - g.data
    assert np.sqrt(float((step ** 2).sum())) == pytest.approx(1.0, rel=1e-9)
    np.testing.assert_allclose(step, g.grad / norm, rtol=1e-12)
    with pytest.raises(ValidationError):
        SGD(net.params, lr=1.0, clip=0.0)


def test_train_step_rejects_empty_batch():
    net = PairNet(_tiny_cfg(seed=6))
    with pytest.raises(ValidationError):
        train_step(net, [], SGD(net.params, lr=1e-3), seed=0)


def test_train_step_divergence_aborts():
    net = PairNet(_tiny_cfg(seed=7))
    net.params["head1.w"].data[...] = 1e200
    sample = gen_synthetic_pair(35, height=8, width=8)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train_step(net, [sample], SGD(net.params, lr=1e-3), seed=0)


def test_train_step_crops_to_requested_size():
    net = PairNet(_tiny_cfg(seed=8))
    sample = gen_synthetic_pair(36, height=24, width=24)
    opt = SGD(net.params, lr=1e-4, clip=10.0)
    bd = train_step(net, [sample, sample], opt, seed=5, crop_hw=(16, 16))
    assert np.isfinite(bd.total)


def test_build_bundle_slots_and_sparsify():
    sample = gen_synthetic_pair(37, height=16, width=16)
    empty = build_bundle(sample, ())
    assert empty.present() == ()
    full = build_bundle(sample, ("k1", "k2", "d1", "d2", "p12"))
    assert full.present() == ("k1", "k2", "d1", "d2", "p12")
    assert full.d1 is sample.d1
    sparse = build_bundle(sample, ("d1",), np.random.default_rng(0))
    assert sparse.d1.mask.sum() < sample.d1.mask.sum()
    assert sparse.d1.mask.sum() > 0


def test_overfit_single_sample_descends():
    sample = gen_synthetic_pair(38, height=16, width=16)
    net = PairNet(_tiny_cfg(seed=9))
    opt = SGD(net.params, lr=3e-4, clip=50.0)
    first = train_step(net, [sample], opt, seed=1).total
    losses = [train_step(net, [sample], opt, seed=1).total for _ in range(30)]
    assert losses[-1] < first
    assert min(losses) == pytest.approx(losses[-1], rel=0.5)


def test_train_toy_deterministic_and_saves(tmp_path):
    cfg = _tiny_cfg(seed=11)
    kw = dict(steps=3, batch_size=2, lr=1e-4, seed=11, pool_size=3,
              image_size=16, crop_margin=4)
    net_a, hist_a = train_toy(cfg, **kw)
    net_b, hist_b = train_toy(cfg, **kw, out_path=tmp_path / "t.ckpt")
    assert hist_a == hist_b
    for name, arr in net_a.params.arrays().items():
        np.testing.assert_array_equal(arr, net_b.params.arrays()[name])
    back = PairNet.load(tmp_path / "t.ckpt")
    assert back.cfg == cfg


def test_train_toy_logs_progress():
    cfg = _tiny_cfg(seed=12)
    lines = []
    net, hist = train_toy(cfg, steps=2, batch_size=1, lr=1e-4, seed=12,
                          pool_size=2, image_size=16, crop_margin=0,
                          log=lines.append, log_every=1)
    assert len(hist) == 2
    assert len(lines) == 2
    assert "loss" in lines[0]
