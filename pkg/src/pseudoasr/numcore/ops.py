"""Differentiable primitives.

Broadcasting is limited to leading dimensions: for binary elementwise ops
the operand shapes must be equal, or one must be a suffix of the other
(e.g. a ``[D]`` bias added to ``[B, T, D]`` activations). Anything else is
a :class:`ShapeError` naming the primitive.
"""

from __future__ import annotations

from numbers import Number
from typing import Sequence

import numpy as np

from .tensor import DEFAULT_DTYPE, Function, ShapeError, Tensor, as_tensor


def _check_suffix(name: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(name, a, b, detail="only leading-dimension broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # matmul may broadcast size-1 batch dims
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_suffix(self.name, a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_suffix(self.name, a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_suffix(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, a):
        return a * self.kwargs["c"]

    def backward(self, g):
        return (g * self.kwargs["c"],)


class Shift(Function):
    name = "shift"

    def forward(self, a):
        return a + self.kwargs["c"]

    def backward(self, g):
        return (g,)


class Reciprocal(Function):
    name = "reciprocal"

    def forward(self, a):
        self.out = 1.0 / a
        return self.out

    def backward(self, g):
        return (-g * self.out * self.out,)


def add(a, b) -> Tensor:
    if isinstance(b, Number):
        return Shift.apply(a, c=float(b))
    if isinstance(a, Number):
        return Shift.apply(b, c=float(a))
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return Shift.apply(a, c=-float(b))
    if isinstance(a, Number):
        return Shift.apply(Scale.apply(b, c=-1.0), c=float(a))
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        return Scale.apply(a, c=float(b))
    if isinstance(a, Number):
        return Scale.apply(b, c=float(a))
    return Mul.apply(a, b)


def reciprocal(a) -> Tensor:
    return Reciprocal.apply(a)


# -- linear algebra ----------------------------------------------------------

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.name, a.shape, b.shape)
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(self.name, a.shape, b.shape, detail="batch dims") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


# -- shape ops ----------------------------------------------------------------

class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.kwargs["shape"])
        except ValueError:
            raise ShapeError(self.name, a.shape, self.kwargs["shape"]) from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.kwargs["axes"]
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class GetItem(Function):
    name = "getitem"

    def forward(self, a):
        self.in_shape = a.shape
        return a[self.kwargs["idx"]]

    def backward(self, g):
        idx = self.kwargs["idx"]
        out = np.zeros(self.in_shape, dtype=g.dtype)
        parts = idx if isinstance(idx, tuple) else (idx,)
        if any(isinstance(i, (np.ndarray, list)) for i in parts):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)


class Concat(Function):
    name = "concat"

    def forward(self, *xs):
        axis = self.kwargs["axis"]
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeError(self.name, *[x.shape for x in xs]) from None
        self.sizes = [x.shape[axis] for x in xs]
        return out

    def backward(self, g):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.kwargs["axis"]))


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def getitem(a, idx) -> Tensor:
    return GetItem.apply(a, idx=idx)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    return Concat.apply(*xs, axis=axis)


# -- reductions ---------------------------------------------------------------

class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.kwargs["axis"], keepdims=self.kwargs["keepdims"])

    def backward(self, g):
        axis, keepdims = self.kwargs["axis"], self.kwargs["keepdims"]
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise unary --------------------------------------------------------

class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Silu(Function):
    name = "silu"

    def forward(self, a):
        self.a = a
        self.s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return a * self.s

    def backward(self, g):
        s = self.s
        return (g * (s + self.a * s * (1.0 - s)),)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (2.0 * g * self.a,)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def tanh(a) -> Tensor:
    return Tanh.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def silu(a) -> Tensor:
    return Silu.apply(a)


def square(a) -> Tensor:
    return Square.apply(a)


# -- normalizations over the last axis -----------------------------------------

def _np_logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        e = np.exp(a - np.max(a, axis=-1, keepdims=True))
        self.out = e / np.sum(e, axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a):
        self.out = a - _np_logsumexp(a, axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        return (g - np.exp(self.out) * np.sum(g, axis=-1, keepdims=True),)


class LogSumExp(Function):
    name = "logsumexp"

    def forward(self, a):
        self.a = a
        self.out = _np_logsumexp(a, axis=-1)
        return self.out

    def backward(self, g):
        w = np.exp(self.a - self.out[..., None])
        return (g[..., None] * w,)


class LayerNormStats(Function):
    """(x - mean) / sqrt(var + eps) over the last axis; no affine part."""

    name = "layer_norm"

    def forward(self, a):
        eps = self.kwargs["eps"]
        mu = a.mean(axis=-1, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.y = xc * self.inv
        return self.y

    def backward(self, g):
        y = self.y
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (self.inv * (g - gm - y * gy),)


class RMSNormStats(Function):
    name = "rms_norm"

    def forward(self, a):
        eps = self.kwargs["eps"]
        self.inv = 1.0 / np.sqrt((a * a).mean(axis=-1, keepdims=True) + eps)
        self.y = a * self.inv
        return self.y

    def backward(self, g):
        y = self.y
        return (self.inv * (g - y * (g * y).mean(axis=-1, keepdims=True)),)


def softmax(a) -> Tensor:
    return Softmax.apply(a)


def log_softmax(a) -> Tensor:
    return LogSoftmax.apply(a)


def logsumexp(a) -> Tensor:
    return LogSumExp.apply(a)


def layer_norm_stats(a, eps: float = 1e-5) -> Tensor:
    return LayerNormStats.apply(a, eps=eps)


def rms_norm_stats(a, eps: float = 1e-6) -> Tensor:
    return RMSNormStats.apply(a, eps=eps)


# -- gather / scatter ---------------------------------------------------------

class Take(Function):
    """Row gather: ``table[idx]`` for an integer index array of any shape."""

    name = "take"

    def forward(self, table):
        idx = self.kwargs["idx"]
        self.in_shape = table.shape
        return table[idx]

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        np.add.at(out, self.kwargs["idx"], g)
        return (out,)


class Pick(Function):
    """Select one entry per row along the last axis: ``x[..., idx[...]]``."""

    name = "pick"

    def forward(self, a):
        idx = self.kwargs["idx"]
        if idx.shape != a.shape[:-1]:
            raise ShapeError(self.name, a.shape, idx.shape)
        self.in_shape = a.shape
        return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        np.put_along_axis(out, self.kwargs["idx"][..., None], g[..., None], axis=-1)
        return (out,)


def take(table, idx) -> Tensor:
    return Take.apply(table, idx=np.asarray(idx, dtype=np.int64))


def pick(a, idx) -> Tensor:
    return Pick.apply(a, idx=np.asarray(idx, dtype=np.int64))


# -- convolution support -------------------------------------------------------

class Unfold(Function):
    """Sliding windows along the time axis (-2): ``[..., T, C] -> [..., T_out, K, C]``.

    Zero padding ``pad_left``/``pad_right`` is applied first; ``T_out =
    (T + pads - K) // stride + 1``. Used for strided front-end convolutions
    (kernel == stride) and depthwise convolutions (stride 1).
    """

    name = "unfold"

    def forward(self, a):
        k, s = self.kwargs["kernel"], self.kwargs["stride"]
        pl, pr = self.kwargs["pad_left"], self.kwargs["pad_right"]
        if a.ndim < 2:
            raise ShapeError(self.name, a.shape, detail="need [..., T, C]")
        pad = [(0, 0)] * (a.ndim - 2) + [(pl, pr), (0, 0)]
        ap = np.pad(a, pad)
        tp = ap.shape[-2]
        if tp < k:
            raise ShapeError(self.name, a.shape, detail=f"kernel {k} longer than padded input")
        t_out = (tp - k) // s + 1
        self.idx = np.arange(t_out)[:, None] * s + np.arange(k)[None, :]
        self.padded_shape = ap.shape
        self.in_len = a.shape[-2]
        return ap[..., self.idx, :]

    def backward(self, g):
        gp = np.zeros(self.padded_shape, dtype=g.dtype)
        lead = (slice(None),) * (len(self.padded_shape) - 2)
        np.add.at(gp, lead + (self.idx,), g)
        pl = self.kwargs["pad_left"]
        return (gp[..., pl:pl + self.in_len, :],)


def unfold(a, kernel: int, stride: int = 1, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    return Unfold.apply(a, kernel=kernel, stride=stride, pad_left=pad_left, pad_right=pad_right)


class RowMask(Function):
    """Replace rows where ``mask`` is true by a (tracked) vector: ``[..., D]``."""

    name = "row_mask"

    def forward(self, x, vec):
        m = self.kwargs["mask"]
        if m.shape != x.shape[:-1] or vec.shape != x.shape[-1:]:
            raise ShapeError(self.name, x.shape, vec.shape, m.shape)
        self.m = m[..., None]
        return np.where(self.m, vec, x)

    def backward(self, g):
        gx = np.where(self.m, 0.0, g)
        gv = np.where(self.m, g, 0.0).reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gv


def row_mask(x, vec, mask) -> Tensor:
    return RowMask.apply(x, vec, mask=np.asarray(mask, dtype=bool))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
