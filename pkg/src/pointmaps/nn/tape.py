# Reverse-mode autodiff over numpy arrays, in the micrograd tradition:
# each op stores a closure that routes the output gradient to its inputs,
# and backward() replays the closures in reverse topological order.
#
# Differences from the usual toy engines, needed for the transformer here:
# full broadcasting support (gradients are summed back to the input shape),
# batched matmul, shape ops (reshape/transpose/slice/concat) and fused
# softmax/layernorm/GELU backward rules.  Everything is float64.
#
# Parameters that never enter a graph keep their zero gradient buffers
# untouched, so gradients through unused branches are exactly zero.

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = ["Tensor", "concat"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tensor:
    """A numpy array plus its gradient buffer and backprop closure.

    Binary ops accept plain arrays or scalars for the other operand;
    those are treated as constants and receive no gradient (and create
    no graph edge), which keeps tapes small.
    """

    _no_grad = False

    # keep numpy from hijacking `ndarray <op> Tensor`; with ufunc handling
    # disabled numpy returns NotImplemented and python falls back to our
    # reflected operators
    __array_ufunc__ = None

    class no_grad:
        def __enter__(self):
            self._prev, Tensor._no_grad = Tensor._no_grad, True

        def __exit__(self, *exc):
            Tensor._no_grad = self._prev

    def __init__(self, data, _children=(), name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._backward = lambda: None
        self._prev = tuple(_children)
        self.name = name

    # ------------------------------------------------------------ plumbing

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _make(self, data, children, backward):
        if Tensor._no_grad:
            return Tensor(data)
        out = Tensor(data, children)
        out._backward = backward(out)
        return out

    def backward(self):
        if Tensor._no_grad:
            raise RuntimeError("backward() inside no_grad")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()

    # ------------------------------------------------------- arithmetic

    def __add__(self, other):
        od = _data(other)
        if isinstance(other, Tensor):
            def bw(out):
                def _backward():
                    self.grad += _unbroadcast(out.grad, self.shape)
                    other.grad += _unbroadcast(out.grad, other.shape)
                return _backward
            return self._make(self.data + od, (self, other), bw)

        def bw(out):
            def _backward():
                self.grad += _unbroadcast(out.grad, self.shape)
            return _backward
        return self._make(self.data + od, (self,), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(out):
            def _backward():
                self.grad -= out.grad
            return _backward
        return self._make(-self.data, (self,), bw)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_data(other))

    def __rsub__(self, other):
        return (-self) + _data(other)

    def __mul__(self, other):
        od = _data(other)
        if isinstance(other, Tensor):
            def bw(out):
                def _backward():
                    self.grad += _unbroadcast(out.grad * od, self.shape)
                    other.grad += _unbroadcast(out.grad * self.data, other.shape)
                return _backward
            return self._make(self.data * od, (self, other), bw)

        def bw(out):
            def _backward():
                self.grad += _unbroadcast(out.grad * od, self.shape)
            return _backward
        return self._make(self.data * od, (self,), bw)

    __rmul__ = __mul__

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        def bw(out):
            def _backward():
                self.grad += p * self.data ** (p - 1) * out.grad
            return _backward
        return self._make(self.data ** p, (self,), bw)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / _data(other))

    def __rtruediv__(self, other):
        return _data(other) * self ** -1.0

    def __matmul__(self, other):
        od = _data(other)
        if isinstance(other, Tensor):
            def bw(out):
                def _backward():
                    self.grad += _unbroadcast(out.grad @ od.swapaxes(-1, -2), self.shape)
                    other.grad += _unbroadcast(self.data.swapaxes(-1, -2) @ out.grad, other.shape)
                return _backward
            return self._make(self.data @ od, (self, other), bw)

        def bw(out):
            def _backward():
                self.grad += _unbroadcast(out.grad @ od.swapaxes(-1, -2), self.shape)
            return _backward
        return self._make(self.data @ od, (self,), bw)

    def __rmatmul__(self, other):
        od = _data(other)
        def bw(out):
            def _backward():
                self.grad += _unbroadcast(od.swapaxes(-1, -2) @ out.grad, self.shape)
            return _backward
        return self._make(od @ self.data, (self,), bw)

    # -------------------------------------------------------- shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        def bw(out):
            def _backward():
                self.grad += out.grad.reshape(old)
            return _backward
        return self._make(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        def bw(out):
            def _backward():
                self.grad += out.grad.transpose(inv)
            return _backward
        return self._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, idx):
        def bw(out):
            def _backward():
                np.add.at(self.grad, idx, out.grad)
            return _backward
        return self._make(self.data[idx], (self,), bw)

    # ------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims=False):
        def bw(out):
            def _backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.grad += np.broadcast_to(g, self.shape)
            return _backward
        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ------------------------------------------------------ elementwise

    def exp(self):
        def bw(out):
            def _backward():
                self.grad += out.data * out.grad
            return _backward
        return self._make(np.exp(self.data), (self,), bw)

    def log(self):
        def bw(out):
            def _backward():
                self.grad += out.grad / self.data
            return _backward
        return self._make(np.log(self.data), (self,), bw)

    def sqrt(self):
        def bw(out):
            def _backward():
                self.grad += 0.5 / out.data * out.grad
            return _backward
        return self._make(np.sqrt(self.data), (self,), bw)

    def gelu(self):
        # exact form: 0.5 x (1 + erf(x / sqrt(2)))
        x = self.data
        cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        def bw(out):
            def _backward():
                self.grad += (cdf + x * pdf) * out.grad
            return _backward
        return self._make(x * cdf, (self,), bw)

    # ------------------------------------------------------------ fused

    def softmax(self):
        """Numerically stable softmax over the last axis."""
        e = np.exp(self.data - self.data.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        def bw(out):
            def _backward():
                g = out.grad
                self.grad += s * (g - (s * g).sum(axis=-1, keepdims=True))
            return _backward
        return self._make(s, (self,), bw)

    def layernorm(self, eps: float = 1e-6):
        """Zero-mean unit-variance normalization over the last axis.

        Affine scale/shift are applied by the caller with separate
        parameter tensors so they land in the parameter store.
        """
        mu = self.data.mean(axis=-1, keepdims=True)
        var = ((self.data - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = (self.data - mu) * inv
        def bw(out):
            def _backward():
                g = out.grad
                gm = g.mean(axis=-1, keepdims=True)
                gym = (g * y).mean(axis=-1, keepdims=True)
                self.grad += inv * (g - gm - y * gym)
            return _backward
        return self._make(y, (self,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along an axis; gradients split back by size."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if Tensor._no_grad:
        return Tensor(data)
    out = Tensor(data, tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def _backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            t.grad += out.grad[tuple(sl)]
    out._backward = _backward
    return out
