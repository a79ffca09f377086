"""Dense arrays with taped reverse-mode differentiation.

Image data uses NCHW layout throughout. Every operation has a forward rule
and a backward (input-gradient) rule recorded on the active :class:`Tape`;
running an op with no active tape is a plain forward pass. Forward results
are checked for NaN/Inf on creation, so a numerical blow-up surfaces as a
:class:`NumericError` at the op that produced it instead of propagating.

Double precision is the default; single precision is accepted and preserved
(scalar operands are cast to the tensor's dtype, never promoted).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A structural parameter (kernel extent, reduction ratio, ...) is invalid."""


class NumericError(ArithmeticError):
    """A forward computation produced NaN or Inf."""


_uids = itertools.count(1)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: result contains NaN or Inf")


class Tensor:
    """Immutable dense value with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "uid")

    def __init__(self, data, dtype=None, _op: str = "tensor"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _finite_or_raise(arr, _op)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.grad: Optional[np.ndarray] = None
        self.uid = next(_uids)

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape / reduction methods -------------------------------------------
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


@dataclass
class TapeRecord:
    """One executed op: ids for audit, live refs for the backward replay."""

    op: str
    input_ids: tuple
    output_ids: tuple
    inputs: tuple
    outputs: tuple
    backward: Callable


class Tape:
    """Ordered record of executed ops; reverse replay propagates gradients.

    Ops append in execution order, so every input precedes its consumers and
    a single reverse sweep visits each record exactly once. Use as a context
    manager; nesting is allowed and ``Tape.paused()`` opens a no-record scope
    (used for teacher forwards and stop-gradient branches).
    """

    _stack: list = []

    def __init__(self):
        self.records: list[TapeRecord] = []

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = Tape._stack.pop()
        assert popped is self
        return False

    class _Paused:
        def __enter__(self):
            Tape._stack.append(None)
            return self

        def __exit__(self, *exc):
            Tape._stack.pop()
            return False

    @staticmethod
    def paused():
        return Tape._Paused()

    def watched_ids(self) -> set:
        ids: set = set()
        for rec in self.records:
            ids.update(rec.input_ids)
            ids.update(rec.output_ids)
        return ids

    def backward(self, root: Tensor) -> None:
        """Seed d(root)=1 and accumulate gradients into every taped input."""
        if root.size != 1:
            raise DimensionError("backward root must be scalar")
        root.grad = np.ones_like(root.data)
        for rec in reversed(self.records):
            gouts = [o.grad for o in rec.outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g for g, o in zip(gouts, rec.outputs)]
            gins = rec.backward(*gouts)
            for t, g in zip(rec.inputs, gins):
                if g is None:
                    continue
                t.grad = g if t.grad is None else t.grad + g


def _record(op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
    tape = Tape.current()
    if tape is not None:
        tape.records.append(
            TapeRecord(
                op,
                tuple(t.uid for t in inputs),
                tuple(t.uid for t in outputs),
                tuple(inputs),
                tuple(outputs),
                backward,
            )
        )


def _const_like(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.dtype))


def _coerce(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data, _op="add")
    _record("add", (a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data, _op="sub")
    _record("sub", (a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data, _op="mul")
    _record(
        "mul",
        (a, b),
        (out,),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):  # finite check raises instead
        out = Tensor(a.data / b.data, _op="div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    _record("div", (a, b), (out,), backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _op="neg")
    _record("neg", (a,), (out,), lambda g: (-g,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or stacked leading batch dims (numpy semantics)."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape} disagree")
    try:
        out = Tensor(a.data @ b.data, _op="matmul")
    except ValueError as e:
        raise DimensionError(f"matmul: incompatible batch dims {a.shape} x {b.shape}") from e

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    _record("matmul", (a, b), (out,), backward)
    return out


# -- pointwise nonlinearities ---------------------------------------------------

def elu(x: Tensor) -> Tensor:
    """ELU with alpha=1: x for x>0, exp(x)-1 otherwise."""
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, np.expm1(x.data)), _op="elu")
    _record("elu", (x,), (out,), lambda g: (g * np.where(pos, 1.0, np.exp(x.data)),))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _op="relu")
    _record("relu", (x,), (out,), lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s, _op="sigmoid")
    _record("sigmoid", (x,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0,1]; gradient passes only strictly inside the interval."""
    inside = (x.data > 0.0) & (x.data < 1.0)
    out = Tensor(np.clip(x.data, 0.0, 1.0), _op="clip01")
    _record("clip01", (x,), (out,), lambda g: (g * inside,))
    return out


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data), _op="abs")
    _record("abs", (x,), (out,), lambda g: (g * np.sign(x.data),))
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e, _op="exp")
    _record("exp", (x,), (out,), lambda g: (g * e,))
    return out


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):  # finite check raises instead
        out = Tensor(np.log(x.data), _op="log")
    _record("log", (x,), (out,), lambda g: (g / x.data,))
    return out


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):  # finite check raises instead
        r = np.sqrt(x.data)
    out = Tensor(r, _op="sqrt")
    _record("sqrt", (x,), (out,), lambda g: (g * 0.5 / r,))
    return out


# -- shape ops ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.data.reshape(shape), _op="reshape")
    _record("reshape", (x,), (out,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes), _op="transpose")
    _record("transpose", (x,), (out,), lambda g: (g.transpose(inv),))
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start}:{start + length}] exceeds axis extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index], _op="narrow")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    _record("narrow", (x,), (out,), backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _op="concat")
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i, p in enumerate(parts):
            index = [slice(None)] * p.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    _record("concat", tuple(parts), (out,), backward)
    return out


# -- reductions -------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims), _op="sum")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    _record("sum", (x,), (out,), backward)
    return out


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), _op="mean")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    _record("mean", (x,), (out,), backward)
    return out


# -- image ops ---------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-channel 2-D convolution (correlation), NCHW x (Cout,Cin,kh,kw).

    Lowered to one im2col matmul per call; the column matrix is kept for the
    backward pass (cheap at the image sizes this package targets).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW weights")
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    length = ho * wo
    cols = np.empty((n, cin, kh, kw, length), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, i, j, :] = xs.reshape(n, cin, length)
    cols2 = cols.reshape(n, cin * kh * kw, length)
    w2 = np.ascontiguousarray(w.data.reshape(cout, cin * kh * kw))
    out = Tensor((w2 @ cols2).reshape(n, cout, ho, wo), _op="conv2d")

    def backward(g):
        g2 = g.reshape(n, cout, length)
        gw = (g2 @ cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(n, cin, kh, kw, length)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, i, j, :
                ].reshape(n, cin, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    _record("conv2d", (x, w), (out,), backward)
    return out


def depthwise_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 'same' convolution; kernels (C,kh,kw) with odd extents."""
    if x.ndim != 4 or kernels.ndim != 3:
        raise DimensionError("depthwise_conv2d expects NCHW input and (C,kh,kw) kernels")
    n, c, h, w = x.shape
    ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"depthwise_conv2d: {ck} kernels for {c} channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("depthwise_conv2d: kernel extents must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i : i + h, j : j + w] * kernels.data[:, i, j][None, :, None, None]
    out = Tensor(y, _op="depthwise_conv2d")

    def backward(g):
        gk = np.zeros_like(kernels.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gk[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + h, j : j + w])
                gxp[:, :, i : i + h, j : j + w] += g * kernels.data[:, i, j][None, :, None, None]
        return gxp[:, :, ph : ph + h, pw : pw + w], gk

    _record("depthwise_conv2d", (x, kernels), (out,), backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _op="global_avg_pool")
    _record(
        "global_avg_pool",
        (x,),
        (out,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )
    return out


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an integer factor."""
    if x.ndim != 4:
        raise DimensionError("avg_pool2d expects NCHW")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d: extents {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    blocks = x.data.reshape(n, c, ho, factor, wo, factor)
    out = Tensor(blocks.mean(axis=(3, 5)), _op="avg_pool2d")

    def backward(g):
        g = g[:, :, :, None, :, None] / (factor * factor)
        return (np.broadcast_to(g, (n, c, ho, factor, wo, factor)).reshape(x.shape).copy(),)

    _record("avg_pool2d", (x,), (out,), backward)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    if x.ndim != 4:
        raise DimensionError("upsample2x expects NCHW")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), _op="upsample2x")
    _record(
        "upsample2x",
        (x,),
        (out,),
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )
    return out


def fft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized 2-D DFT over the trailing two axes; returns (real, imag)."""
    if x.ndim < 2:
        raise DimensionError("fft2 expects at least 2 dims")
    spec = np.fft.fft2(x.data, axes=(-2, -1))
    re = Tensor(np.ascontiguousarray(spec.real), _op="fft2")
    im = Tensor(np.ascontiguousarray(spec.imag), _op="fft2")
    hw = x.shape[-2] * x.shape[-1]

    def backward(gre, gim):
        # adjoint of the unnormalized DFT on real input
        return (np.fft.ifft2(gre + 1j * gim, axes=(-2, -1)).real * hw,)

    _record("fft2", (x,), (re, im), backward)
    return re, im


def ifft2_array(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` on plain arrays (real part of the inverse DFT)."""
    return np.fft.ifft2(re + 1j * im, axes=(-2, -1)).real


# -- gradient checking --------------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_diff: float
    grad_scale: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, name: str = "f") -> GradCheckReport:
    """Compare taped gradient of scalar f at x against central differences.

    Relative error is normalized by the larger gradient's max magnitude, so a
    handful of near-zero coordinates cannot dominate the report. ``f`` must be
    evaluated at a point where it is smooth (callers keep clear of ReLU/clip
    kinks) and must be deterministic.
    """
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise DimensionError("grad_check target must be scalar-valued")
        tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    base = np.array(x.data, dtype=np.float64)
    numeric = np.zeros_like(base)
    flat = base.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return GradCheckReport(
        name=name,
        max_rel_error=float(diff.max(initial=0.0) / scale),
        max_abs_diff=float(diff.max(initial=0.0)),
        grad_scale=float(scale),
    )
