"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The engine keeps a flat tape of executed operations and replays it in exact
reverse execution order on `backward`. The operator set is fixed to what the
segmentation networks and losses in this package need: conv2d, leaky_relu,
softmax, log, elementwise arithmetic with trailing-dim broadcasting,
reductions, bilinear upsampling and shape plumbing. There is no graph
compiler, no fusion and no GPU path.

Two precisions are used deliberately: float32 for training, float64 for
gradient verification via `grad_check`. All reductions use numpy's fixed
accumulation order, so repeated runs of the same op sequence produce
bit-identical buffers.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class AutodiffError(ValueError):
    """Raised for shape mismatches, domain errors and non-finite values."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """Dense real array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail(
            f"item() on tensor of shape {self.shape}")

    def detach(self):
        """Constant view of this tensor's values (shares the buffer)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self, retain_grads=False):
        backward(self, retain_grads=retain_grads)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def _fail(msg):
    raise AutodiffError(msg)


class _Record:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of executed ops, replayed in reverse by `backward`."""

    def __init__(self):
        self._records = []
        self._paused = 0

    @property
    def recording(self):
        return self._paused == 0

    def clear(self):
        """Drop all records, freeing saved intermediate buffers."""
        self._records.clear()

    def __len__(self):
        return len(self._records)


_TAPE = Tape()


def get_tape():
    return _TAPE


def clear_tape():
    _TAPE.clear()


@contextmanager
def no_grad():
    """Pause tape recording; forwards run without building backward records."""
    _TAPE._paused += 1
    try:
        yield
    finally:
        _TAPE._paused -= 1


def backward(loss, retain_grads=False):
    """Accumulate gradients of `loss` into every tensor on its tape path.

    Walks the tape in exact reverse execution order. Gradients of op outputs
    are dropped once consumed unless retain_grads is set; leaf tensors
    (parameters, inputs) keep theirs, so separate subgraphs on one tape can
    be differentiated by successive calls without cross-talk.
    """
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for rec in reversed(_TAPE._records):
        g = rec.out.grad
        if g is None:
            continue
        rec.fn(g)
        if not retain_grads:
            rec.out.grad = None


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Finite-value guard
# ---------------------------------------------------------------------------

_FINITE_GUARD = True


def set_finite_guard(enabled):
    """Toggle per-op output finiteness checking; returns the previous value.

    The guard costs one extra pass over every op output. The training loop
    disables it and instead verifies each loss scalar per iteration.
    """
    global _FINITE_GUARD
    prev = _FINITE_GUARD
    _FINITE_GUARD = bool(enabled)
    return prev


@contextmanager
def finite_guard(enabled):
    prev = set_finite_guard(enabled)
    try:
        yield
    finally:
        set_finite_guard(prev)


def _guard(arr, opname):
    if _FINITE_GUARD and not np.isfinite(arr.sum(dtype=np.float64)):
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"{opname}: non-finite value in output")
    return arr


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------

def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            _fail(f"mixed dtypes {a.dtype.name} vs {b.dtype.name}; convert explicitly")
        return a, b
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _from_op(data, inputs, make_backward, opname):
    _guard(data, opname)
    out = Tensor(data)
    if _TAPE.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE._records.append(_Record(out, make_backward(out)))
    return out


def _accum(t, g):
    # out-of-place accumulation: backward fns may hand over shared buffers
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b)

    def make_backward(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        return fn

    return _from_op(a.data + b.data, (a, b), make_backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)

    def make_backward(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        return fn

    return _from_op(a.data - b.data, (a, b), make_backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b)

    def make_backward(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        return fn

    return _from_op(a.data * b.data, (a, b), make_backward, "mul")


def div(a, b):
    a, b = _binary_operands(a, b)

    def make_backward(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return fn

    return _from_op(a.data / b.data, (a, b), make_backward, "div")


def log(x):
    x = _as_tensor(x)
    if x.data.min() <= 0.0:
        _fail(f"log: non-positive input (min={x.data.min():g}); clamp first")

    def make_backward(out):
        def fn(g):
            _accum(x, g / x.data)
        return fn

    return _from_op(np.log(x.data), (x,), make_backward, "log")


def clamp_min(x, floor):
    x = _as_tensor(x)
    floor = float(floor)
    mask = x.data > floor

    def make_backward(out):
        def fn(g):
            _accum(x, g * mask)
        return fn

    return _from_op(np.maximum(x.data, floor), (x,), make_backward, "clamp_min")


def power(x, exponent):
    """x ** exponent for a constant real exponent."""
    x = _as_tensor(x)
    p = float(exponent)

    def make_backward(out):
        def fn(g):
            _accum(x, g * p * np.power(x.data, p - 1.0))
        return fn

    return _from_op(np.power(x.data, p), (x,), make_backward, "power")


def absolute(x):
    x = _as_tensor(x)
    sign = np.sign(x.data)

    def make_backward(out):
        def fn(g):
            _accum(x, g * sign)
        return fn

    return _from_op(np.abs(x.data), (x,), make_backward, "absolute")


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def make_backward(out):
        def fn(g):
            _accum(x, g * y * (1.0 - y))
        return fn

    return _from_op(y, (x,), make_backward, "sigmoid")


def leaky_relu(x, slope):
    """Elementwise max(x, slope * x); slope 0 degenerates to ReLU."""
    x = _as_tensor(x)
    slope = float(slope)
    if not 0.0 <= slope < 1.0:
        _fail(f"leaky_relu: slope {slope} outside [0, 1)")
    d = x.data
    s = np.asarray(slope, dtype=d.dtype)
    y = np.maximum(d, d * s)  # equivalent to the piecewise form for slope in [0,1)

    def make_backward(out):
        def fn(g):
            _accum(x, np.where(d >= 0, g, g * s))
        return fn

    return _from_op(y, (x,), make_backward, "leaky_relu")


def softmax(x, axis):
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        _fail(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def make_backward(out):
        def fn(g):
            gy = y * g
            _accum(x, gy - y * gy.sum(axis=axis, keepdims=True))
        return fn

    return _from_op(y, (x,), make_backward, "softmax")


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def make_backward(out):
        def fn(g):
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(gg, x.shape))
        return fn

    return _from_op(np.asarray(y, dtype=x.dtype), (x,), make_backward, "reduce_sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = x.data.mean(axis=axes, keepdims=keepdims, dtype=x.dtype)

    def make_backward(out):
        def fn(g):
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(gg, x.shape) / np.asarray(count, dtype=g.dtype))
        return fn

    return _from_op(np.asarray(y, dtype=x.dtype), (x,), make_backward, "reduce_mean")


def reshape(x, shape):
    x = _as_tensor(x)
    orig = x.shape

    def make_backward(out):
        def fn(g):
            _accum(x, g.reshape(orig))
        return fn

    return _from_op(x.data.reshape(shape), (x,), make_backward, "reshape")


def flatten(x):
    return reshape(x, (-1,))


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        _fail(f"narrow: [{start}, {start + length}) out of range for axis {axis} of shape {x.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(x.ndim))
    y = np.ascontiguousarray(x.data[idx])

    def make_backward(out):
        def fn(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[idx] = g
            _accum(x, gx)
        return fn

    return _from_op(y, (x,), make_backward, "narrow")


def concat(tensors, axis=0):
    """Concatenate along one axis; backward splits the gradient."""
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def make_backward(out):
        def fn(g):
            start = 0
            for t, size in zip(tensors, sizes):
                idx = tuple(slice(start, start + size) if i == axis else slice(None)
                            for i in range(g.ndim))
                if t.requires_grad:
                    _accum(t, g[idx])
                start += size
        return fn

    return _from_op(y, tensors, make_backward, "concat")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    """(N,C,Hp,Wp) -> contiguous (C*kh*kw, N*ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, n * ho * wo)


def _col2im_add(gcols, n, c, kh, kw, hp, wp, ho, wo, stride):
    """Scatter-add a (C*kh*kw, N*ho*wo) gradient back to (N,C,Hp,Wp)."""
    g6 = gcols.reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                g6[:, i, j].transpose(1, 0, 2, 3)
    return gxp


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation, NCHW input against OIKhKw kernel."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        _fail(f"conv2d: need 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        _fail(f"conv2d: input has {c} channels (shape {tuple(x.shape)}) "
              f"but kernel expects {i} (shape {tuple(kernel.shape)})")
    stride = int(stride)
    padding = int(padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        _fail(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding > 0:
        xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out2 = wmat @ cols                                   # (O, N*ho*wo)
    y = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def make_backward(out):
        def fn(g):
            go = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
            if kernel.requires_grad:
                _accum(kernel, (go @ cols.T).reshape(kernel.shape))
            if x.requires_grad:
                gcols = wmat.T @ go
                gxp = _col2im_add(gcols, n, c, kh, kw, hp, wp, ho, wo, stride)
                if padding > 0:
                    gxp = gxp[:, :, padding:padding + h, padding:padding + w]
                _accum(x, gxp)
        return fn

    return _from_op(y, (x, kernel), make_backward, "conv2d")


# ---------------------------------------------------------------------------
# Bilinear upsampling
# ---------------------------------------------------------------------------

_INTERP_CACHE = {}


def _interp_matrix(n_in, factor, dtype):
    """Dense (n_in*factor, n_in) row-interpolation matrix, half-pixel centers."""
    key = (n_in, factor, np.dtype(dtype).name)
    mat = _INTERP_CACHE.get(key)
    if mat is None:
        n_out = n_in * factor
        dst = np.arange(n_out)
        src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        mat = np.zeros((n_out, n_in), dtype=dtype)
        mat[dst, i0] += 1.0 - frac
        mat[dst, i1] += frac
        _INTERP_CACHE[key] = mat
    return mat


def upsample_bilinear(x, factor):
    """Upsample the trailing two spatial dims of an NCHW tensor by an integer factor."""
    x = _as_tensor(x)
    factor = int(factor)
    if factor < 1:
        _fail(f"upsample_bilinear: factor {factor} must be >= 1")
    n, c, h, w = x.shape
    rh = _interp_matrix(h, factor, x.dtype)
    rw = _interp_matrix(w, factor, x.dtype)
    x2 = x.data.reshape(n * c, h, w)
    y = (rh @ x2 @ rw.T).reshape(n, c, h * factor, w * factor)

    def make_backward(out):
        def fn(g):
            g2 = g.reshape(n * c, h * factor, w * factor)
            _accum(x, (rh.T @ g2 @ rw).reshape(n, c, h, w))
        return fn

    return _from_op(y, (x,), make_backward, "upsample_bilinear")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Central-difference comparison of autodiff gradients, per input."""
    max_rel_err: list
    tol: float
    passed: bool
    analytic: list = field(repr=False, default_factory=list)
    numeric: list = field(repr=False, default_factory=list)


def grad_check(f, inputs, eps=1e-5, tol=1e-4):
    """Compare autodiff gradients of scalar f(*inputs) against central differences.

    Inputs must be float64 tensors with requires_grad. Relative error uses
    |a - n| / max(1, |a|, |n|), so near-zero gradients are compared absolutely.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            _fail("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    clear_tape()
    out = f(*inputs)
    if out.size != 1:
        _fail(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    clear_tape()

    numeric = []
    with no_grad():
        for t in inputs:
            flat = t.data.reshape(-1)
            num = np.zeros_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = f(*inputs).item()
                flat[j] = orig - eps
                fm = f(*inputs).item()
                flat[j] = orig
                num[j] = (fp - fm) / (2.0 * eps)
            numeric.append(num.reshape(t.shape))

    max_errs = []
    for a, nmr in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(nmr)))
        max_errs.append(float(np.max(np.abs(a - nmr) / denom)) if a.size else 0.0)

    return GradCheckReport(
        max_rel_err=max_errs,
        tol=tol,
        passed=all(e < tol for e in max_errs),
        analytic=analytic,
        numeric=numeric,
    )
