"""Finite-difference checks for the autodiff tape."""

import numpy as np
import pytest

from pointmaps.nn.tape import Tensor, concat


def _numgrad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _check(build, x0, rtol=1e-6, atol=1e-8):
    """Compare tape gradient of build(Tensor)->Tensor scalar vs central differences."""
    t = Tensor(x0.copy())
    out = build(t)
    assert out.size == 1
    out.backward()
    want = _numgrad(lambda arr: float(build(Tensor(arr)).data), x0.copy())
    np.testing.assert_allclose(t.grad, want, rtol=rtol, atol=atol)


rng = np.random.default_rng(0)


def test_add_broadcast_bias():
    x = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    _check(lambda t: ((t + Tensor(b)) ** 2.0).sum(), x)
    tb = Tensor(b.copy())
    out = ((Tensor(x) + tb) ** 2.0).sum()
    out.backward()
    want = _numgrad(lambda arr: float(((Tensor(x) + Tensor(arr)) ** 2.0).sum().data), b.copy())
    np.testing.assert_allclose(tb.grad, want, rtol=1e-6)


def test_mul_broadcast_rows():
    x = rng.standard_normal((2, 5))
    w = rng.standard_normal((1, 5))
    _check(lambda t: (t * Tensor(w) + 1.0).sum(), x)


def test_constant_operands_make_no_edges():
    x = rng.standard_normal((2, 2))
    c = rng.standard_normal((2, 2))
    t = Tensor(x)
    out = (t * c + c).sum()
    assert out._prev == ((t * c)._prev[0],) or len(out._prev) == 1
    out.backward()
    np.testing.assert_allclose(t.grad, c)


def test_pow_and_div():
    x = np.abs(rng.standard_normal((3, 3))) + 0.5
    _check(lambda t: (t ** 3.0).sum(), x)
    _check(lambda t: (1.0 / t).sum(), x)
    _check(lambda t: (t / 2.5).sum(), x)


def test_matmul_plain():
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    _check(lambda t: (t @ Tensor(b)).sum(), a)
    tb = Tensor(b.copy())
    (Tensor(a) @ tb).sum().backward()
    want = _numgrad(lambda arr: float((Tensor(a) @ Tensor(arr)).sum().data), b.copy())
    np.testing.assert_allclose(tb.grad, want, rtol=1e-6)


def test_matmul_batched_against_shared_weight():
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    tw = Tensor(w.copy())
    ((Tensor(x) @ tw) ** 2.0).sum().backward()
    want = _numgrad(lambda arr: float(((Tensor(x) @ Tensor(arr)) ** 2.0).sum().data), w.copy())
    np.testing.assert_allclose(tw.grad, want, rtol=1e-6)


def test_matmul_batched_both_sides():
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 3))
    _check(lambda t: (t @ Tensor(b)).sum(), a)


def test_rmatmul_constant_left():
    c = rng.standard_normal((3, 4))
    x = rng.standard_normal((4, 2))
    _check(lambda t: (c @ t).sum(), x)


def test_reshape_transpose_roundtrip():
    x = rng.standard_normal((2, 3, 4))
    _check(lambda t: (t.reshape(6, 4).transpose(1, 0) ** 2.0).sum(), x)


def test_getitem_slice():
    x = rng.standard_normal((4, 5))
    _check(lambda t: (t[1:3, ::2] ** 2.0).sum(), x)


def test_concat_grads_split():
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((4, 3))
    ta, tb = Tensor(a.copy()), Tensor(b.copy())
    (concat([ta, tb], axis=0) ** 2.0).sum().backward()
    np.testing.assert_allclose(ta.grad, 2 * a)
    np.testing.assert_allclose(tb.grad, 2 * b)


def test_sum_axis_keepdims():
    x = rng.standard_normal((3, 4, 2))
    _check(lambda t: ((t.sum(axis=1, keepdims=True) + t) ** 2.0).sum(), x)
    _check(lambda t: (t.sum(axis=(0, 2)) ** 2.0).sum(), x)


def test_mean_matches_manual():
    x = rng.standard_normal((3, 6))
    _check(lambda t: (t.mean(axis=-1) ** 2.0).sum(), x)


def test_exp_log_sqrt():
    x = np.abs(rng.standard_normal((4, 4))) + 0.3
    _check(lambda t: t.exp().sum(), x)
    _check(lambda t: t.log().sum(), x)
    _check(lambda t: t.sqrt().sum(), x, rtol=1e-5)


def test_gelu_matches_reference_and_grad():
    from scipy import special

    x = rng.standard_normal((5, 5))
    got = Tensor(x).gelu().data
    want = 0.5 * x * (1 + special.erf(x / np.sqrt(2)))
    np.testing.assert_allclose(got, want, atol=1e-15)
    _check(lambda t: (t.gelu() ** 2.0).sum(), x, rtol=1e-5)


def test_softmax_rows_sum_to_one_and_grad():
    x = rng.standard_normal((3, 7)) * 3
    s = Tensor(x).softmax()
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    w = rng.standard_normal((3, 7))
    _check(lambda t: (t.softmax() * w).sum(), x, rtol=1e-5)


def test_softmax_shift_invariance():
    x = rng.standard_normal((2, 5))
    a = Tensor(x).softmax().data
    b = Tensor(x + 100.0).softmax().data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_layernorm_stats_and_grad():
    x = rng.standard_normal((4, 8)) * 2 + 1
    y = Tensor(x).layernorm()
    np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.data.std(axis=-1), 1.0, atol=1e-3)
    w = rng.standard_normal((4, 8))
    _check(lambda t: (t.layernorm() * w).sum(), x, rtol=1e-4, atol=1e-6)


def test_value_reused_twice_accumulates():
    x = rng.standard_normal((3,))
    _check(lambda t: (t * t + t).sum(), x)


def test_diamond_graph():
    x = rng.standard_normal((2, 2))
    def build(t):
        a = t.exp()
        b = t * 2.0
        return (a * b).sum()
    _check(build, x, rtol=1e-5)


def test_dead_path_gradient_is_exactly_zero():
    x = Tensor(rng.standard_normal((3, 3)))
    unused = Tensor(rng.standard_normal((3, 3)))
    (x ** 2.0).sum().backward()
    assert np.all(unused.grad == 0.0)
    assert unused.grad.shape == (3, 3)


def test_no_grad_builds_no_graph():
    x = Tensor(rng.standard_normal((2, 2)))
    with Tensor.no_grad():
        out = (x @ x).sum()
    assert out._prev == ()
    with pytest.raises(RuntimeError):
        with Tensor.no_grad():
            out.backward()


def test_loss_shaped_composite():
    # a mini regression loss: sqrt of summed squares, normalized
    x = rng.standard_normal((2, 6, 3))
    gt = rng.standard_normal((2, 6, 3))
    def build(t):
        z = ((t ** 2.0).sum(axis=-1) + 1e-12).sqrt().mean(axis=1, keepdims=True)
        d = t * (1.0 / 3.0) - Tensor(gt) * 0.5
        l = ((d ** 2.0).sum(axis=-1) + 1e-12).sqrt()
        return (l * z).sum()
    _check(build, x, rtol=1e-5, atol=1e-7)


def test_backward_on_deep_chain():
    # deep graphs must not hit recursion limits
    x = Tensor(np.array([1.0]))
    y = x
    for _ in range(3000):
        y = y * 1.0001
    y.sum().backward()
    assert x.grad[0] == pytest.approx(1.0001 ** 3000, rel=1e-9)
