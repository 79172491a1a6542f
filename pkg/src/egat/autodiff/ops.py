"""Differentiable primitives and the functional API built on them."""
from __future__ import annotations

import numpy as np

from .engine import Function, ShapeError, Tensor, as_tensor

LOG_EPS = 1e-12


def _sum_to_shape(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", [a.shape, shape])
    out = a.sum(axis=tuple(range(lead))) if lead else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ShapeError("sum_to", [a.shape, shape])
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else SumTo.apply(g, shape=tuple(shape))


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    op_name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Function):
    op_name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Function):
    op_name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g * b, a.shape) if self.needs(0) else None
        gb = _unbroadcast(g * a, b.shape) if self.needs(1) else None
        return ga, gb


class Div(Function):
    """Plain division; callers add their own floor where a zero denominator is possible."""

    op_name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g / b, a.shape) if self.needs(0) else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if self.needs(1) else None
        return ga, gb


class Neg(Function):
    op_name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    op_name = "pow"

    def forward(self, a):
        return np.power(a, self.attrs["p"])

    def backward(self, g):
        (a,) = self.inputs
        p = self.attrs["p"]
        if p == 0:
            return (None,)
        if p == 1:
            return (g,)
        if p == 2:
            return (g * a * 2.0,)
        return (g * Pow.apply(a, p=p - 1) * p,)


class Exp(Function):
    op_name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.output,)


class Log(Function):
    """log(a + eps); eps defaults to a 1e-12 floor."""

    op_name = "log"

    def forward(self, a):
        return np.log(a + self.attrs["eps"])

    def backward(self, g):
        (a,) = self.inputs
        return (g / (a + self.attrs["eps"]),)


class SafeRecip(Function):
    """1/a with 1/0 defined as 0."""

    op_name = "safe_recip"

    def forward(self, a):
        out = np.zeros_like(a)
        nz = a != 0
        out[nz] = 1.0 / a[nz]
        return out

    def backward(self, g):
        r = self.output
        return (-(g * r * r),)


class Sqrt(Function):
    """Square root with the derivative at 0 taken as 0."""

    op_name = "sqrt"

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        return (g * SafeRecip.apply(self.output) * 0.5,)


class Step(Function):
    """Indicator a > 0. Zero derivative everywhere."""

    op_name = "step"

    def forward(self, a):
        return (a > 0).astype(np.float64)

    def backward(self, g):
        return (None,)


class InRange(Function):
    op_name = "in_range"

    def forward(self, a):
        lo, hi = self.attrs["lo"], self.attrs["hi"]
        m = np.ones_like(a, dtype=bool)
        if lo is not None:
            m &= a >= lo
        if hi is not None:
            m &= a <= hi
        return m.astype(np.float64)

    def backward(self, g):
        return (None,)


class SignMask(Function):
    """sign(a) used as a locally constant factor (abs backward)."""

    op_name = "sign_mask"

    def forward(self, a):
        return np.sign(a)

    def backward(self, g):
        return (None,)


class Sign(Function):
    """Hard sign. First derivative is zero; no second derivative is registered."""

    op_name = "sign"
    second_order = False

    def forward(self, a):
        return np.sign(a)

    def backward(self, g):
        (a,) = self.inputs
        return (Tensor(np.zeros_like(a.data)),)


class Relu(Function):
    op_name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        (a,) = self.inputs
        return (g * Step.apply(a),)


class Abs(Function):
    op_name = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * SignMask.apply(a),)


class Clamp(Function):
    op_name = "clamp"

    def forward(self, a):
        return np.clip(a, self.attrs["lo"], self.attrs["hi"])

    def backward(self, g):
        (a,) = self.inputs
        return (g * InRange.apply(a, lo=self.attrs["lo"], hi=self.attrs["hi"]),)


# ---------------------------------------------------------------------------
# shape manipulation


class Reshape(Function):
    op_name = "reshape"

    def forward(self, a):
        return a.reshape(self.attrs["shape"])

    def backward(self, g):
        (a,) = self.inputs
        return (Reshape.apply(g, shape=a.shape),)


class Transpose(Function):
    op_name = "transpose"

    def forward(self, a):
        return np.transpose(a, self.attrs["axes"])

    def backward(self, g):
        axes = self.attrs["axes"]
        inv = None if axes is None else tuple(np.argsort(axes))
        return (Transpose.apply(g, axes=inv),)


class BroadcastTo(Function):
    op_name = "broadcast_to"

    def forward(self, a):
        return np.broadcast_to(a, self.attrs["shape"]).copy()

    def backward(self, g):
        (a,) = self.inputs
        return (_unbroadcast(g, a.shape),)


class SumTo(Function):
    op_name = "sum_to"

    def forward(self, a):
        return _sum_to_shape(a, self.attrs["shape"])

    def backward(self, g):
        (a,) = self.inputs
        return (BroadcastTo.apply(g, shape=a.shape),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


class Sum(Function):
    op_name = "sum"

    def forward(self, a):
        return np.sum(a, axis=self.attrs["axis"], keepdims=self.attrs["keepdims"])

    def backward(self, g):
        (a,) = self.inputs
        axes = _norm_axis(self.attrs["axis"], a.ndim)
        if not self.attrs["keepdims"]:
            g = Reshape.apply(g, shape=_keepdims_shape(a.shape, axes))
        return (BroadcastTo.apply(g, shape=a.shape),)


class ArgmaxMask(Function):
    """One-hot indicator of the first maximum over ``axis``."""

    op_name = "argmax_mask"

    def forward(self, a):
        axes = _norm_axis(self.attrs["axis"], a.ndim)
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        moved = np.transpose(a, rest + axes)
        lead = moved.shape[: len(rest)]
        flat = moved.reshape(lead + (-1,))
        idx = flat.argmax(axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        mask = mask.reshape(moved.shape)
        return np.transpose(mask, np.argsort(rest + axes))

    def backward(self, g):
        return (None,)


class Max(Function):
    op_name = "max"

    def forward(self, a):
        return np.max(a, axis=self.attrs["axis"], keepdims=self.attrs["keepdims"])

    def backward(self, g):
        (a,) = self.inputs
        axis = self.attrs["axis"]
        axes = _norm_axis(axis, a.ndim)
        if not self.attrs["keepdims"]:
            g = Reshape.apply(g, shape=_keepdims_shape(a.shape, axes))
        return (BroadcastTo.apply(g, shape=a.shape) * ArgmaxMask.apply(a, axis=axis),)


class Pick(Function):
    """out[n] = a[n, idx[n]] for a 2-D ``a``."""

    op_name = "pick"

    def forward(self, a):
        idx = self.attrs["idx"]
        if a.ndim != 2 or len(idx) != a.shape[0]:
            raise ShapeError("pick", [a.shape, np.shape(idx)])
        return a[np.arange(a.shape[0]), idx]

    def backward(self, g):
        (a,) = self.inputs
        return (Scatter.apply(g, idx=self.attrs["idx"], width=a.shape[1]),)


class Scatter(Function):
    op_name = "scatter"

    def forward(self, g):
        idx = self.attrs["idx"]
        out = np.zeros((g.shape[0], self.attrs["width"]))
        out[np.arange(g.shape[0]), idx] = g
        return out

    def backward(self, gg):
        return (Pick.apply(gg, idx=self.attrs["idx"]),)


class Take(Function):
    """Rows ``a[idx]`` along axis 0."""

    op_name = "take"

    def forward(self, a):
        return a[self.attrs["idx"]]

    def backward(self, g):
        (a,) = self.inputs
        return (TakeAdjoint.apply(g, idx=self.attrs["idx"], n=a.shape[0]),)


class TakeAdjoint(Function):
    op_name = "take_adjoint"

    def forward(self, g):
        out = np.zeros((self.attrs["n"],) + g.shape[1:])
        np.add.at(out, self.attrs["idx"], g)
        return out

    def backward(self, gg):
        return (Take.apply(gg, idx=self.attrs["idx"]),)


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Transpose.apply(t, axes=tuple(axes))


class MatMul(Function):
    op_name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", [a.shape, b.shape])
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(MatMul.apply(g, _swap_last(b)), a.shape) if self.needs(0) else None
        gb = _unbroadcast(MatMul.apply(_swap_last(a), g), b.shape) if self.needs(1) else None
        return ga, gb


class LinearMap2d(Function):
    """out = A @ m @ B.T over the last two axes, with constant A and B."""

    op_name = "linear_map2d"

    def forward(self, m):
        A, B = self.attrs["A"], self.attrs["B"]
        if m.ndim < 2 or m.shape[-2] != A.shape[1] or m.shape[-1] != B.shape[1]:
            raise ShapeError("linear_map2d", [m.shape, A.shape, B.shape])
        return np.matmul(np.matmul(A, m), B.T)

    def backward(self, g):
        A, B = self.attrs["A"], self.attrs["B"]
        return (LinearMap2d.apply(g, A=A.T.copy(), B=B.T.copy()),)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)


def _im2col(x, kh, kw, p):
    """(N, C*kh*kw, Ho*Wo) patch matrix built from shifted slices."""
    n, c, h, w = x.shape
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + ho, v:v + wo]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


class Conv2d(Function):
    """Stride-1 cross-correlation with symmetric zero padding."""

    op_name = "conv2d"

    def forward(self, x, w):
        p = self.attrs["padding"]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError("conv2d", [x.shape, w.shape], "expected x (N,C,H,W), w (O,C,kh,kw)")
        kh, kw = w.shape[2:]
        if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
            raise ShapeError("conv2d", [x.shape, w.shape], "kernel larger than padded input")
        cols, ho, wo = _im2col(x, kh, kw, p)
        return np.matmul(w.reshape(w.shape[0], -1), cols).reshape(x.shape[0], w.shape[0], ho, wo)

    def backward(self, g):
        x, w = self.inputs
        p = self.attrs["padding"]
        kh, kw = w.shape[2:]
        if kh != kw:
            raise ShapeError("conv2d.backward", [w.shape], "square kernels only")
        gx = gw = None
        if self.needs(0):
            gx = Conv2d.apply(g, FlipT.apply(w), padding=kh - 1 - p)
        if self.needs(1):
            gw = Conv2dWGrad.apply(x, g, ksize=kh, padding=p)
        return gx, gw


class FlipT(Function):
    """Swap in/out channels and flip spatially. An involution."""

    op_name = "flip_t"

    def forward(self, w):
        return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))

    def backward(self, g):
        return (FlipT.apply(g),)


class Conv2dWGrad(Function):
    """Weight gradient of conv2d given the input and the output gradient."""

    op_name = "conv2d_wgrad"

    def forward(self, x, g):
        k, p = self.attrs["ksize"], self.attrs["padding"]
        cols, _, _ = _im2col(x, k, k, p)
        n, o = g.shape[:2]
        gw = np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(o, x.shape[1], k, k)

    def backward(self, G):
        x, g = self.inputs
        k, p = self.attrs["ksize"], self.attrs["padding"]
        gx = Conv2d.apply(g, FlipT.apply(G), padding=k - 1 - p) if self.needs(0) else None
        gg = Conv2d.apply(x, G, padding=p) if self.needs(1) else None
        return gx, gg


def _check_pool(op, x):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(op, [x.shape], "expected (N,C,H,W) with even H, W")


def _windows4(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unwindows4(v):
    n, c, h, w, _ = v.shape
    return v.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


class MaxPool2(Function):
    op_name = "maxpool2"

    def forward(self, x):
        _check_pool("maxpool2", x)
        return _windows4(x).max(axis=-1)

    def backward(self, g):
        (x,) = self.inputs
        return (MaxPoolScatter.apply(x, g),)


class MaxPoolScatter(Function):
    """Route a pooled gradient to each window's (first) maximum."""

    op_name = "maxpool_scatter"

    def forward(self, x, g):
        idx = _windows4(x).argmax(axis=-1)
        out = np.zeros(g.shape + (4,))
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return _unwindows4(out)

    def backward(self, G):
        x, _ = self.inputs
        return None, MaxPoolGather.apply(x, G)


class MaxPoolGather(Function):
    op_name = "maxpool_gather"

    def forward(self, x, G):
        idx = _windows4(x).argmax(axis=-1)
        return np.take_along_axis(_windows4(G), idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        x, _ = self.inputs
        return None, MaxPoolScatter.apply(x, g)


class AvgPool2(Function):
    op_name = "avgpool2"

    def forward(self, x):
        _check_pool("avgpool2", x)
        return _windows4(x).mean(axis=-1)

    def backward(self, g):
        return (Repeat2.apply(g) * 0.25,)


class Repeat2(Function):
    """Nearest-neighbour 2x upsampling (adjoint of 2x2 sum pooling)."""

    op_name = "repeat2"

    def forward(self, g):
        return g.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, gg):
        return (AvgPool2.apply(gg) * 4.0,)


# ---------------------------------------------------------------------------
# softmax family


class Softmax(Function):
    op_name = "softmax"

    def forward(self, a):
        ax = self.attrs["axis"]
        e = np.exp(a - a.max(axis=ax, keepdims=True))
        return e / e.sum(axis=ax, keepdims=True)

    def backward(self, g):
        s = self.output
        ax = self.attrs["axis"]
        return (s * (g - sum(g * s, axis=ax, keepdims=True)),)


class LogSoftmax(Function):
    op_name = "log_softmax"

    def forward(self, a):
        ax = self.attrs["axis"]
        z = a - a.max(axis=ax, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=ax, keepdims=True))

    def backward(self, g):
        ax = self.attrs["axis"]
        return (g - exp(self.output) * sum(g, axis=ax, keepdims=True),)


# ---------------------------------------------------------------------------
# functional API


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def pow(a, p: float):  # noqa: A001
    return Pow.apply(a, p=float(p))


def exp(a):
    return Exp.apply(a)


def log(a, eps: float = LOG_EPS):
    return Log.apply(a, eps=eps)


def sqrt(a):
    return Sqrt.apply(a)


def relu(a):
    return Relu.apply(a)


def abs(a):  # noqa: A001
    return Abs.apply(a)


def sign(a):
    return Sign.apply(a)


def clamp(a, lo=None, hi=None):
    return Clamp.apply(a, lo=lo, hi=hi)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def broadcast_to(a, shape):
    return BroadcastTo.apply(a, shape=tuple(shape))


def sum_to(a, shape):
    return SumTo.apply(a, shape=tuple(shape))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def max(a, axis=None, keepdims=False):  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Max.apply(a, axis=axis, keepdims=keepdims)


def min(a, axis=None, keepdims=False):  # noqa: A001
    return -max(-as_tensor(a), axis=axis, keepdims=keepdims)


def l1_norm(a, axis=None, keepdims=False):
    return sum(abs(a), axis=axis, keepdims=keepdims)


def l2_norm(a, axis=None, keepdims=False):
    a = as_tensor(a)
    return sqrt(sum(a * a, axis=axis, keepdims=keepdims))


def matmul(a, b):
    return MatMul.apply(a, b)


def dense(x, w, b=None):
    """x (N, in) @ w.T (in, out) + b."""
    out = matmul(x, transpose(w))
    return out if b is None else out + b


def conv2d(x, w, b=None, padding: int = 0):
    out = Conv2d.apply(x, w, padding=int(padding))
    if b is not None:
        out = out + reshape(b, (1, -1, 1, 1))
    return out


def maxpool2d(x):
    return MaxPool2.apply(x)


def avgpool2d(x):
    return AvgPool2.apply(x)


def softmax(a, axis: int = -1):
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis: int = -1):
    return LogSoftmax.apply(a, axis=axis)


def pick(a, idx):
    return Pick.apply(a, idx=np.asarray(idx, dtype=np.int64))


def take(a, idx):
    return Take.apply(a, idx=np.asarray(idx, dtype=np.int64))


def linear_map2d(m, A, B):
    return LinearMap2d.apply(m, A=np.asarray(A, dtype=np.float64), B=np.asarray(B, dtype=np.float64))
