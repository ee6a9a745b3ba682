"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the op set the stage-1/stage-2 models need: broadcasting
arithmetic, matmul (batched), conv2d (delegating to deocc.kernels),
nearest-neighbor upsampling, softmax, the usual pointwise nonlinearities,
reductions, reshape/transpose/concat/slice.  Gradients are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import kernels


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- autograd -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_sum_to(g, a.data.shape))
            if b.requires_grad:
                b._accum(_sum_to(g, b.data.shape))

        return Tensor._op(data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accum(-g)

        return Tensor._op(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_sum_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_sum_to(g * a.data, b.data.shape))

        return Tensor._op(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_sum_to(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_sum_to(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._op(data, (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, p: float):
        a = self
        data = a.data ** p

        def backward(g):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor._op(data, (a,), backward)

    def __matmul__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_sum_to(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accum(_sum_to(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return Tensor._op(data, (a, b), backward)

    def __getitem__(self, key):
        a = self
        data = a.data[key]

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor._op(data, (a,), backward)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = a.data.reshape(shape)

        def backward(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._op(data, (a,), backward)

    def transpose(self, *axes):
        a = self
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(g):
            a._accum(g.transpose(inv))

        return Tensor._op(a.data.transpose(axes), (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis=axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._op(data, (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- pointwise ------------------------------------------------------------

    def exp(self):
        a = self
        data = np.exp(a.data)

        def backward(g):
            a._accum(g * data)

        return Tensor._op(data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            a._accum(g / a.data)

        return Tensor._op(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        data = np.sqrt(a.data)

        def backward(g):
            a._accum(g * 0.5 / data)

        return Tensor._op(data, (a,), backward)

    def sigmoid(self):
        a = self
        data = expit(a.data)

        def backward(g):
            a._accum(g * data * (1.0 - data))

        return Tensor._op(data, (a,), backward)

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def backward(g):
            a._accum(g * (1.0 - data * data))

        return Tensor._op(data, (a,), backward)

    def silu(self):
        a = self
        s = expit(a.data)
        data = a.data * s

        def backward(g):
            a._accum(g * (s + a.data * s * (1.0 - s)))

        return Tensor._op(data, (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accum(g * mask)

        return Tensor._op(a.data * mask, (a,), backward)

    def clip(self, lo: float, hi: float):
        a = self
        data = np.clip(a.data, lo, hi)
        pass_ = (a.data >= lo) & (a.data <= hi)

        def backward(g):
            a._accum(g * pass_)

        return Tensor._op(data, (a,), backward)

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum(data * (g - dot))

        return Tensor._op(data, (a,), backward)


# -- multi-input / structural ops ----------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._op(data, tuple(tensors), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    n, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    data = kernels.conv2d_fwd(x.data, w.data, b.data, stride, pad)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accum(kernels.conv2d_bwd_input(g, w.data, stride, pad, h, wd))
        if w.requires_grad:
            w._accum(kernels.conv2d_bwd_weight(g, x.data, stride, pad, kh, kw))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._op(data, (x, w, b), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.data.shape
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        x._accum(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor._op(data, (x,), backward)
