"""Differentiable primitives.

Elementwise binary operations require equal shapes. The only implicit
broadcast is bias addition inside ``affine`` and ``conv2d``; anything else
goes through :func:`expand`.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericInputError, ShapeError
from .tensor import Function, Tensor, as_tensor


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise
class _Add(Function):
    def forward(self, a, b):
        _same_shape("add", a, b)
        return a + b

    def backward(self, g):
        return g, g


class _Sub(Function):
    def forward(self, a, b):
        _same_shape("sub", a, b)
        return a - b

    def backward(self, g):
        return g, -g


class _Mul(Function):
    def forward(self, a, b):
        _same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class _Div(Function):
    def forward(self, a, b):
        _same_shape("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        gb = g / self.b
        return gb, -gb * self.a / self.b


class _Scale(Function):
    def forward(self, a):
        return a * self.kwargs["c"]

    def backward(self, g):
        return (g * self.kwargs["c"],)


class _AddConst(Function):
    def forward(self, a):
        return a + self.kwargs["c"]

    def backward(self, g):
        return (g,)


def _constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.full(ref.shape, value, dtype=ref.dtype))


def add(a, b) -> Tensor:
    if np.isscalar(b):
        return _AddConst.apply(a, c=float(b))
    if np.isscalar(a):
        return _AddConst.apply(b, c=float(a))
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    if np.isscalar(b):
        return _AddConst.apply(a, c=-float(b))
    if np.isscalar(a):
        return _AddConst.apply(_Scale.apply(b, c=-1.0), c=float(a))
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        return _Scale.apply(a, c=float(b))
    if np.isscalar(a):
        return _Scale.apply(b, c=float(a))
    return _Mul.apply(a, b)


def div(a, b) -> Tensor:
    if np.isscalar(b):
        return _Scale.apply(a, c=1.0 / float(b))
    if np.isscalar(a):
        b = as_tensor(b)
        return _Div.apply(_constant_like(a, b), b)
    return _Div.apply(a, b)


def scale(a, c: float) -> Tensor:
    return _Scale.apply(a, c=float(c))


class _Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class _Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class _Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (g * _sigmoid(self.a),)


class _Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class _Silu(Function):
    def forward(self, a):
        self.a = a
        self.s = _sigmoid(a)
        return a * self.s

    def backward(self, g):
        s = self.s
        return (g * (s + self.a * s * (1.0 - s)),)


class _Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out**2),)


class _Clip(Function):
    def forward(self, a):
        lo, hi = self.kwargs["lo"], self.kwargs["hi"]
        self.mask = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, g):
        return (g * self.mask,)


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def exp(a) -> Tensor:
    return _Exp.apply(a)


def log(a) -> Tensor:
    return _Log.apply(a)


def softplus(a) -> Tensor:
    return _Softplus.apply(a)


def relu(a) -> Tensor:
    return _Relu.apply(a)


def silu(a) -> Tensor:
    return _Silu.apply(a)


def tanh(a) -> Tensor:
    return _Tanh.apply(a)


def clip(a, lo: float, hi: float) -> Tensor:
    return _Clip.apply(a, lo=float(lo), hi=float(hi))


ACTIVATIONS = {"relu": relu, "silu": silu, "tanh": tanh, "softplus": softplus}


# ---------------------------------------------------------------- structural
class _Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.sum(a, axis=self.kwargs["axis"], keepdims=self.kwargs["keepdims"])

    def backward(self, g):
        axis = self.kwargs["axis"]
        if axis is not None and not self.kwargs["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, self.shape).copy(),)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


class _Reshape(Function):
    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.kwargs["shape"])

    def backward(self, g):
        return (g.reshape(self.shape),)


def reshape(a, shape) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


class _Transpose(Function):
    def forward(self, a):
        return np.transpose(a, self.kwargs["axes"])

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.kwargs["axes"])),)


def transpose(a, axes) -> Tensor:
    return _Transpose.apply(a, axes=tuple(axes))


class _Expand(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.broadcast_to(a, self.kwargs["shape"]).copy()

    def backward(self, g):
        shape = self.shape
        lead = g.ndim - len(shape)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    return _Expand.apply(a, shape=tuple(shape))


class _Concat(Function):
    def forward(self, *arrays):
        axis = self.kwargs["axis"]
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.kwargs["axis"]))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


class _Index(Function):
    def forward(self, a):
        self.shape = a.shape
        self.dtype = a.dtype
        return np.array(a[self.kwargs["index"]], copy=True)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.kwargs["index"], g)
        return (out,)


def index(a, idx) -> Tensor:
    return _Index.apply(a, index=idx)


# ---------------------------------------------------------------- linear algebra
class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a, b) -> Tensor:
    return _MatMul.apply(a, b)


class _Affine(Function):
    def forward(self, x, w, b):
        if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
            raise ShapeError(f"affine: input {x.shape}, weight {w.shape}, bias {b.shape}")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, g):
        if g.ndim == 1:
            return g @ self.w, np.outer(g, self.x), g
        return g @ self.w, g.T @ self.x, g.sum(axis=0)


def affine(x, weight, bias) -> Tensor:
    """``weight @ x + bias`` for a vector, or row-wise for a [B, D_in] batch."""
    return _Affine.apply(x, weight, bias)


class _Einsum(Function):
    def forward(self, a, b):
        spec = self.kwargs["spec"]
        self.a, self.b = a, b
        return np.einsum(spec, a, b, optimize=True)

    def backward(self, g):
        ins, out = self.kwargs["spec"].split("->")
        sa, sb = ins.split(",")
        ga = np.einsum(f"{out},{sb}->{sa}", g, self.b, optimize=True) if self.needs[0] else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, self.a, optimize=True) if self.needs[1] else None
        return ga, gb


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every input index must appear in the output or the other operand."""
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        missing = set(own) - set(out) - set(other)
        if missing or len(set(own)) != len(own):
            raise ShapeError(f"einsum spec {spec!r} not supported")
    return _Einsum.apply(a, b, spec=spec.replace(" ", ""))


# ---------------------------------------------------------------- convolution
class _Conv2d(Function):
    def forward(self, x, w, b):
        stride, pad = self.kwargs["stride"], self.kwargs["padding"]
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}")
        if w.shape[1] != x.shape[1]:
            raise ShapeError(f"conv2d: kernel expects {w.shape[1]} channels, input has {x.shape[1]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
        kh, kw = w.shape[2:]
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if kh > x.shape[2] or kw > x.shape[3]:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
        self.xshape = x.shape
        self.w = w
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.win = win
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,Co
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        out = np.ascontiguousarray(out)
        return out[0] if self.squeeze else out

    def backward(self, g):
        stride, pad = self.kwargs["stride"], self.kwargs["padding"]
        if self.squeeze:
            g = g[None]
        w = self.w
        kh, kw = w.shape[2:]
        ho, wo = g.shape[2:]
        gx = gw = None
        if self.needs[1]:
            gw = np.tensordot(g, self.win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if self.needs[2] else None
        if self.needs[0]:
            gxp = np.zeros(self.xshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        "oc,bohw->bchw", w[:, :, i, j], g, optimize=True
                    )
            gx = gxp[:, :, pad:self.xshape[2] - pad, pad:self.xshape[3] - pad]
            if self.squeeze:
                gx = gx[0]
        return gx, gw, gb


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C,H,W] or [B,C,H,W] with ``kernel`` [Co,C,kh,kw]."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride}, padding {padding}")
    kernel = as_tensor(kernel)
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[0], dtype=kernel.dtype))
    return _Conv2d.apply(x, kernel, bias, stride=int(stride), padding=int(padding))


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------- roi pooling
def bilinear_plan(rois: np.ndarray, scale: float, size: int, height: int, width: int):
    """Sample indices and weights for ``size x size`` bin-centre sampling.

    ``rois`` rows are (x, y, w, h) in image pixels; ``scale`` maps image
    pixels to feature cells. Pixel centres sit at +0.5 (align_corners=False).
    Returns per-ROI (y0, y1, wy0, wy1) of shape [R, S] and likewise for x.
    Samples more than one cell outside the map get zero weight.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    frac = (np.arange(size) + 0.5) / size

    def axis_plan(start, extent, limit):
        coord = (start[:, None] + frac[None, :] * extent[:, None]) * scale - 0.5
        valid = (coord >= -1.0) & (coord <= limit)
        c = np.clip(coord, 0.0, None)
        lo = np.floor(c).astype(np.int64)
        at_edge = lo >= limit - 1
        lo = np.where(at_edge, limit - 1, lo)
        hi = np.where(at_edge, limit - 1, lo + 1)
        c = np.where(at_edge, lo.astype(np.float64), c)
        whi = c - lo
        wlo = 1.0 - whi
        return lo, hi, wlo * valid, whi * valid

    ys = axis_plan(rois[:, 1], rois[:, 3], height)
    xs = axis_plan(rois[:, 0], rois[:, 2], width)
    return ys, xs


class _RoiAlign(Function):
    def forward(self, feat):
        squeeze = feat.ndim == 3
        if squeeze:
            feat = feat[None]
        self.shape = feat.shape
        self.squeeze = squeeze
        b_idx = self.kwargs["batch_index"]
        (y0, y1, wy0, wy1), (x0, x1, wx0, wx1) = self.kwargs["plan"]
        b = b_idx[:, None, None]
        out = 0.0
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                vals = feat[b, :, yi[:, :, None], xi[:, None, :]]  # R,S,S,C
                out = out + vals * (wy[:, :, None] * wx[:, None, :])[..., None]
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, g):
        b_idx = self.kwargs["batch_index"]
        (y0, y1, wy0, wy1), (x0, x1, wx0, wx1) = self.kwargs["plan"]
        gf = np.zeros(self.shape, dtype=g.dtype)
        gm = np.moveaxis(g, 1, -1)  # R,S,S,C
        b = b_idx[:, None, None]
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                wgt = (wy[:, :, None] * wx[:, None, :])[..., None]
                bb, yy, xx = np.broadcast_arrays(b, yi[:, :, None], xi[:, None, :])
                np.add.at(gf, (bb, slice(None), yy, xx), gm * wgt)
        return (gf[0] if self.squeeze else gf,)


def roi_align(feature, rois, scale: float, size: int, batch_index=None) -> Tensor:
    """Bilinear ROI pooling of a [C,H,W] or [B,C,H,W] map into [R,C,S,S]."""
    feature = as_tensor(feature)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if size < 1:
        raise ShapeError(f"roi_align: grid size {size} < 1")
    h, w = feature.shape[-2:]
    if batch_index is None:
        batch_index = np.zeros(len(rois), dtype=np.int64)
    plan = bilinear_plan(rois, scale, size, h, w)
    return _RoiAlign.apply(feature, plan=plan, batch_index=np.asarray(batch_index, dtype=np.int64))


# ---------------------------------------------------------------- losses
def _stable_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _Softmax(Function):
    def forward(self, z):
        self.p = _stable_softmax(z)
        return self.p

    def backward(self, g):
        p = self.p
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def softmax(logits) -> Tensor:
    return _Softmax.apply(logits)


class _CrossEntropy(Function):
    def forward(self, z):
        if not np.all(np.isfinite(z)):
            raise NumericInputError("softmax_cross_entropy: non-finite logits")
        target = self.kwargs["target"]
        z2 = z[None] if z.ndim == 1 else z
        t = np.atleast_1d(target)
        if z2.ndim != 2 or len(t) != len(z2):
            raise ShapeError(f"cross entropy: logits {z.shape}, targets {t.shape}")
        if np.any(t < 0) or np.any(t >= z2.shape[1]):
            raise ShapeError("cross entropy: target index out of range")
        shifted = z2 - z2.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        self.p = np.exp(shifted - lse[:, None])
        self.t = t
        self.vector = z.ndim == 1
        losses = lse - shifted[np.arange(len(t)), t]
        return np.asarray(losses.mean()) if len(t) else np.asarray(0.0)

    def backward(self, g):
        n = len(self.t)
        grad = self.p.copy()
        grad[np.arange(n), self.t] -= 1.0
        grad *= g / max(n, 1)
        return (grad[0] if self.vector else grad,)


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows (or for a single vector)."""
    return _CrossEntropy.apply(logits, target=np.asarray(target, dtype=np.int64))


class _SmoothL1(Function):
    def forward(self, pred, target):
        _same_shape("smooth_l1", pred, target)
        beta = self.kwargs["beta"]
        d = pred - target
        ad = np.abs(d)
        self.d, self.ad = d, ad
        loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
        rows = loss.reshape(len(loss), -1).sum(axis=1) if loss.ndim > 1 else loss
        self.n = len(rows) if loss.ndim > 1 else 1
        return np.asarray(rows.sum() / max(self.n, 1))

    def backward(self, g):
        beta = self.kwargs["beta"]
        grad = np.where(self.ad < beta, self.d / beta, np.sign(self.d))
        return grad * g / max(self.n, 1), None


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Smooth-L1 summed over coordinates, averaged over rows."""
    return _SmoothL1.apply(pred, target, beta=float(beta))
