"""Dense tensors with reverse-mode automatic differentiation on a tape.

Every value flowing through the detector is a Tensor wrapping a row-major
numpy array. Ops executed while a Tape is active append a node (output +
local gradient rule); backward() replays the tape in reverse, accumulating
gradients additively into every requires_grad tensor. Parameters created
with requires_grad=True start with an all-zero gradient buffer, so unused
parameters read back exactly 0 after a backward pass.

Default precision is float32; wrap gradient audits in precision("float64")
for the strict tolerance regime. finite_diff_check() is the central-
difference verification harness used across the test suite.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ConfigError(ValueError):
    """A structural/configuration precondition is violated."""


class NumericError(ArithmeticError):
    """Non-finite values detected by the paranoid validation pass."""


# ---------------------------------------------------------------------------
# precision + paranoid modes

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_paranoid = os.environ.get("LKDETR_PARANOID", "") not in ("", "0")


def set_default_dtype(dtype):
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {dtype!r}; use float32/float64")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32/float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. for double-precision audits)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_paranoid(flag):
    global _paranoid
    _paranoid = bool(flag)


def _check_finite(op, arr):
    if _paranoid and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op {op!r}")


# ---------------------------------------------------------------------------
# RNG

class RngState:
    """Counter-based (Philox) random stream, splittable by string tags.

    Identical seeds produce identical sample streams across platforms and
    processes; split() derives an independent child stream from a tag, so
    consumers can draw order-independently.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, tag):
        digest = hashlib.blake2b(
            f"{self.seed}/{tag}".encode(), digest_size=8).digest()
        return RngState(int.from_bytes(digest, "little"))

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def normal(self, shape=(), std=1.0):
        return self._gen.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std=1.0, bound=2.0):
        """Normal(0, std) resampled until within +/- bound*std."""
        out = self._gen.normal(0.0, std, size=shape)
        limit = bound * std
        bad = np.abs(out) > limit
        while np.any(bad):
            out[bad] = self._gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > limit
        return out

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def shuffled(self, n):
        perm = np.arange(n)
        self._gen.shuffle(perm)
        return perm


# ---------------------------------------------------------------------------
# Tensor + Tape

class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # sugar -----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of ops; single-owner, consumed by exactly one backward."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(out, inputs, fn):
    tape = _active_tape()
    if tape is None:
        return
    if any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, fn))


def backward(tape, loss):
    """Reverse sweep: populate .grad on every requires_grad tensor.

    loss must be a scalar tensor recorded on this tape; a tape can only be
    consumed once.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError(
            f"backward expects a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.fn(g)
        node.out.grad = None  # intermediates are never leaves; free eagerly
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(name, a, b, fwd, da, db):
    av, bv = _value(a), _value(b)
    out = Tensor(fwd(av, bv))
    _check_finite(name, out.data)

    def fn(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(da(g, av, bv), av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(db(g, av, bv), np.shape(bv)))

    _record(out, (a, b), fn)
    return out


def _unary(name, x, fwd, dx):
    xv = _value(x)
    out = Tensor(fwd(xv))
    _check_finite(name, out.data)

    def fn(g):
        _accum(x, dx(g, xv, out.data))

    _record(out, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(x):
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def pow_(x, p):
    p = float(p)
    return _unary("pow", x, lambda v: v ** p,
                  lambda g, v, o: g * p * v ** (p - 1.0))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def abs_(x):
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def softplus(x):
    return _unary("softplus", x, lambda v: np.logaddexp(np.zeros((), v.dtype), v),
                  lambda g, v, o: g / (1.0 + np.exp(-v)))


def clamp(x, lo=None, hi=None):
    def fwd(v):
        return np.clip(v, lo, hi)

    def dx(g, v, o):
        mask = np.ones_like(v)
        if lo is not None:
            mask = mask * (v >= lo)
        if hi is not None:
            mask = mask * (v <= hi)
        return g * mask

    return _unary("clamp", x, fwd, dx)


def maximum(a, b):
    def da(g, x, y):
        return g * (x >= y)

    def db(g, x, y):
        return g * (x < y)

    return _binary("maximum", a, b, np.maximum, da, db)


def minimum(a, b):
    def da(g, x, y):
        return g * (x <= y)

    def db(g, x, y):
        return g * (x > y)

    return _binary("minimum", a, b, np.minimum, da, db)


def gelu(x):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)

    def fwd(v):
        return (0.5 * v * (1.0 + erf(v * inv_sqrt2))).astype(v.dtype)

    def dx(g, v, o):
        cdf = 0.5 * (1.0 + erf(v * inv_sqrt2))
        pdf = np.exp(-0.5 * v * v) * inv_sqrt2pi
        return g * (cdf + v * pdf).astype(v.dtype)

    return _unary("gelu", x, fwd, dx)


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary("sigmoid", x, fwd, lambda g, v, o: g * o * (1.0 - o))


def softmax(x, axis=-1):
    xv = _value(x)
    if not -xv.ndim <= axis < xv.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {xv.shape}")

    def fwd(v):
        shifted = v - np.max(v, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    def dx(g, v, o):
        return o * (g - np.sum(g * o, axis=axis, keepdims=True))

    return _unary("softmax", x, fwd, dx)


# ---------------------------------------------------------------------------
# matmul / conv / norm / sampling

def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {av.shape} x {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {av.shape} x {bv.shape}")
    out = Tensor(np.matmul(av, bv))
    _check_finite("matmul", out.data)

    def fn(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape))

    _record(out, (a, b), fn)
    return out


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def conv2d(x, w, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2-d cross-correlation with zero padding.

    x: [N,Cin,H,W] or [Cin,H,W]; w: [Cout,Cin/groups,kh,kw]. 1x1 stride-1
    ungrouped convolutions take a matmul fast path; everything else goes
    through the kernel backend.
    """
    xv, wv = _value(x), _value(w)
    squeeze = xv.ndim == 3
    if squeeze:
        xv = xv[None]
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {xv.shape} x {wv.shape}")
    n, cin, h, wd = xv.shape
    cout, cig, kh, kw = wv.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigError(
            f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cig != cin // groups:
        raise ShapeError(
            f"weight expects {cig * groups} input channels, input has {cin}")
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    ho = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * padding[1] - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d produces empty output {ho}x{wo} for input {h}x{wd}")

    pointwise = (kh == 1 and kw == 1 and stride == (1, 1)
                 and padding == (0, 0) and groups == 1)
    if pointwise:
        w2 = wv[:, :, 0, 0]
        yv = np.matmul(w2, xv.reshape(n, cin, h * wd)).reshape(n, cout, h, wd)
    else:
        xv = np.ascontiguousarray(xv)
        wv_c = np.ascontiguousarray(wv)
        yv = kernels.conv2d_forward(xv, wv_c, stride, padding, dilation, groups)
    bv = _value(bias) if bias is not None else None
    if bv is not None:
        if bv.shape != (cout,):
            raise ShapeError(f"bias shape {bv.shape} != ({cout},)")
        yv = yv + bv.reshape(1, cout, 1, 1)
    out = Tensor(yv[0] if squeeze else yv)
    _check_finite("conv2d", out.data)

    def fn(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4)
        if isinstance(x, Tensor) and x.requires_grad:
            if pointwise:
                gx = np.matmul(wv[:, :, 0, 0].T,
                               g4.reshape(n, cout, h * wd)).reshape(xv.shape)
            else:
                gx = kernels.conv2d_backward_input(
                    g4, np.ascontiguousarray(wv), xv.shape, stride, padding,
                    dilation, groups)
            _accum(x, gx[0] if squeeze else gx)
        if isinstance(w, Tensor) and w.requires_grad:
            if pointwise:
                gw = np.einsum("nop,nip->oi", g4.reshape(n, cout, h * wd),
                               xv.reshape(n, cin, h * wd),
                               optimize=True)[:, :, None, None]
                gw = gw.astype(wv.dtype)
            else:
                gw = kernels.conv2d_backward_weight(
                    g4, xv, wv.shape, stride, padding, dilation, groups)
            _accum(w, gw)
        if bias is not None and isinstance(bias, Tensor) and bias.requires_grad:
            _accum(bias, g4.sum(axis=(0, 2, 3)))

    _record(out, (x, w, bias), fn)
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then affine. Exact analytic gradient."""
    xv, gv, bv = _value(x), _value(gamma), _value(beta)
    c = xv.shape[-1]
    if gv.shape != (c,) or bv.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gv.shape}/{bv.shape} != ({c},)")
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xv - mu) * inv
    out = Tensor(xh * gv + bv)
    _check_finite("layer_norm", out.data)

    def fn(g):
        if isinstance(x, Tensor) and x.requires_grad:
            gg = g * gv
            term = gg - gg.mean(axis=-1, keepdims=True) \
                - xh * (gg * xh).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)
        if isinstance(gamma, Tensor) and gamma.requires_grad:
            _accum(gamma, (g * xh).reshape(-1, c).sum(axis=0))
        if isinstance(beta, Tensor) and beta.requires_grad:
            _accum(beta, g.reshape(-1, c).sum(axis=0))

    _record(out, (x, gamma, beta), fn)
    return out


def bilinear_sample_grouped(feat, pts):
    """Sample feat[g] at pts[g] with bilinear weights and zero padding.

    feat: [G,C,H,W]; pts: [G,P,2] as normalized (x, y) where the
    (i,j) texel center lies at ((j+0.5)/W, (i+0.5)/H). Differentiable in
    both the features and the point coordinates.
    """
    fv, pv = _value(feat), _value(pts)
    if fv.ndim != 4 or pv.ndim != 3 or pv.shape[-1] != 2 or fv.shape[0] != pv.shape[0]:
        raise ShapeError(f"bilinear_sample_grouped got {fv.shape} x {pv.shape}")
    fv = np.ascontiguousarray(fv)
    pv = np.ascontiguousarray(pv.astype(fv.dtype, copy=False))
    out = Tensor(kernels.bilinear_forward(fv, pv))
    _check_finite("bilinear_sample", out.data)

    def fn(g):
        need_f = isinstance(feat, Tensor) and feat.requires_grad
        need_p = isinstance(pts, Tensor) and pts.requires_grad
        gfeat, gpts = kernels.bilinear_backward(fv, pv, np.ascontiguousarray(g))
        if need_f:
            _accum(feat, gfeat)
        if need_p:
            _accum(pts, gpts)

    _record(out, (feat, pts), fn)
    return out


def bilinear_sample(feature, points):
    """[C,H,W] x [P,2] -> [P,C]; see bilinear_sample_grouped for conventions."""
    f = feature if isinstance(feature, Tensor) else Tensor(feature)
    p = points if isinstance(points, Tensor) else Tensor(points)
    fg = reshape(f, (1,) + f.shape)
    pg = reshape(p, (1,) + p.shape)
    out = bilinear_sample_grouped(fg, pg)
    return reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# reductions & shape ops

def _norm_axes(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % ndim for a in axes)
    for a in axes:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {axis} invalid for ndim {ndim}")
    return axes


def sum_(x, axis=None, keepdims=False):
    xv = _value(x)
    axes = _norm_axes(axis, xv.ndim)
    out = Tensor(xv.sum(axis=axes, keepdims=keepdims))

    def fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, xv.shape))

    _record(out, (x,), fn)
    return out


def mean(x, axis=None, keepdims=False):
    xv = _value(x)
    axes = _norm_axes(axis, xv.ndim)
    count = xv.size if axes is None else int(np.prod([xv.shape[a] for a in axes]))
    out = Tensor(xv.mean(axis=axes, keepdims=keepdims))

    def fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, xv.shape) / count)

    _record(out, (x,), fn)
    return out


def max_(x, axis=None, keepdims=False):
    """Max reduction; backward routes to the first (lowest flat index) argmax."""
    xv = _value(x)
    if axis is None:
        out = Tensor(xv.max(keepdims=keepdims))
        flat_idx = int(np.argmax(xv))

        def fn(g):
            gx = np.zeros_like(xv)
            gx.reshape(-1)[flat_idx] = g.reshape(-1)[0]
            _accum(x, gx)

        _record(out, (x,), fn)
        return out
    ax = axis % xv.ndim
    out = Tensor(xv.max(axis=ax, keepdims=keepdims))
    idx = np.argmax(xv, axis=ax)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(idx, ax), g, axis=ax)
        _accum(x, gx)

    _record(out, (x,), fn)
    return out


def concat(tensors, axis=0):
    vals = [_value(t) for t in tensors]
    base = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i]
                for i in range(len(base))):
            raise ShapeError(
                f"concat shapes incompatible along axis {axis}: "
                f"{[v.shape for v in vals]}")
    out = Tensor(np.concatenate(vals, axis=axis))
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if isinstance(t, Tensor) and t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    _record(out, tuple(tensors), fn)
    return out


def split(x, sizes, axis=0):
    """Split into len(sizes) tensors along axis; sizes must sum to the dim."""
    xv = _value(x)
    ax = axis % xv.ndim
    if sum(sizes) != xv.shape[ax]:
        raise ShapeError(f"split sizes {sizes} != dim {xv.shape[ax]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        sl = [slice(None)] * xv.ndim
        sl[ax] = slice(int(lo), int(hi))
        piece = Tensor(xv[tuple(sl)].copy())

        def fn(g, sl=tuple(sl)):
            gx = np.zeros_like(xv)
            gx[sl] = g
            _accum(x, gx)

        _record(piece, (x,), fn)
        outs.append(piece)
    return outs


def reshape(x, shape):
    xv = _value(x)
    out = Tensor(xv.reshape(shape))

    def fn(g):
        _accum(x, g.reshape(xv.shape))

    _record(out, (x,), fn)
    return out


def transpose(x, axes=None):
    xv = _value(x)
    if axes is None:
        axes = tuple(reversed(range(xv.ndim)))
    out = Tensor(np.ascontiguousarray(np.transpose(xv, axes)))
    inv = np.argsort(axes)

    def fn(g):
        _accum(x, np.transpose(g, inv))

    _record(out, (x,), fn)
    return out


def broadcast_to(x, shape):
    xv = _value(x)
    out = Tensor(np.broadcast_to(xv, shape).copy())

    def fn(g):
        _accum(x, _unbroadcast(g, xv.shape))

    _record(out, (x,), fn)
    return out


def gather_rows(x, indices):
    """Pick rows (axis 0) by integer index; duplicate indices accumulate."""
    xv = _value(x)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(xv[idx])

    def fn(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    _record(out, (x,), fn)
    return out


def upsample_nearest2x(x, out_hw=None):
    """Nearest x2 upsampling of trailing [H,W]; optional crop to out_hw."""
    xv = _value(x)
    h, w = xv.shape[-2], xv.shape[-1]
    oh, ow = out_hw if out_hw is not None else (2 * h, 2 * w)
    if not (h <= oh <= 2 * h and w <= ow <= 2 * w):
        raise ShapeError(f"cannot upsample {h}x{w} to {oh}x{ow} with factor 2")
    up = np.repeat(np.repeat(xv, 2, axis=-2), 2, axis=-1)
    out = Tensor(np.ascontiguousarray(up[..., :oh, :ow]))

    def fn(g):
        gp = np.zeros(xv.shape[:-2] + (2 * h, 2 * w), dtype=g.dtype)
        gp[..., :oh, :ow] = g
        gx = gp.reshape(xv.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1))
        _accum(x, gx)

    _record(out, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckEntry:
    param_index: int
    coord: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self):
        return [e for e in self.entries if e.rel_err > self.tol]

    @property
    def passed(self):
        return not self.failures


def finite_diff_check(f, params, h=1e-3, tol=1e-3, max_coords=4, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    Per sampled coordinate: rel = |a - n| / max(|a|, |n|, 1e-8). Failures
    are collected in the report, never raised. f must be deterministic.
    """
    rng = rng or RngState(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol, h=h)
    for pi, p in enumerate(params):
        n = p.data.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.split(f"fd{pi}").choice(n, max_coords))
        flat = p.data.reshape(-1)
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(f().item())
            flat[c] = orig - h
            f_minus = float(f().item())
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            report.entries.append(GradCheckEntry(pi, c, a, numeric, rel))
    return report
