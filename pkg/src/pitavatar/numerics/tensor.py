"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active are recorded; ``tape.backward``
walks the recording in reverse and accumulates gradients into leaf tensors.
Outside a tape every op is a plain numpy computation.
"""
from __future__ import annotations

import numba
import numpy as np

_TAPES: list["Tape"] = []


class Tape:
    """Linear record of differentiable ops. Single owner; reset per iteration."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes.clear()

    def record(self, out, parents, backward):
        out.node = len(self.nodes)
        self.nodes.append((out, parents, backward))

    def backward(self, loss, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs an explicit grad for shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                p.grad = pg if p.grad is None else p.grad + pg
            if not out.is_leaf:
                out.grad = None


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.node = None
        self.name = name

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def make(data, parents, backward):
    """Wrap ``data`` as an op output; record on the active tape if needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, parents, backward)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only scalar exponents are supported")
    x = a.data
    return make(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)
    return make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def relu(a):
    x = a.data
    return make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def silu(a):
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        # 0.5 (1 + t) + 0.5 x (1 - t²) du, with du the derivative of the tanh argument
        du = x * x
        du *= 3 * 0.044715 * _GELU_C
        du += _GELU_C
        r = t * t
        np.subtract(1.0, r, out=r)
        r *= x
        r *= du
        r += t
        r += 1.0
        r *= 0.5
        r *= g
        return (r,)

    return make(out, (a,), backward)


def absolute(a):
    x = a.data
    return make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clip(a, lo=None, hi=None):
    x = a.data
    out = np.clip(x, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x >= lo
    if hi is not None:
        keep &= x <= hi
    return make(out, (a,), lambda g: (g * keep,))


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make(np.where(cond, a.data, b.data), (a, b),
                lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ------------------------------------------------------------------ reductions

def tsum(a, axis=None, keepdims=False):
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape plumbing

def reshape(a, shape):
    old = a.data.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _scatter_rows(n, idx, g):
    """Sum rows of ``g`` into an (n, ...) buffer at integer positions ``idx``."""
    flat = g.reshape(len(idx), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + g.shape[1:])


def getitem(a, idx):
    shape = a.data.shape
    out = a.data[idx]
    row_gather = isinstance(idx, np.ndarray) and idx.dtype.kind in "iu" and idx.ndim == 1
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        if row_gather:
            return (_scatter_rows(shape[0], idx, g),)
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(out, (a,), backward)


def take_rows(a, idx):
    """Gather rows ``a[idx]`` for a 1-D integer index (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    return getitem(a, idx)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make(out, tuple(tensors),
                lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------- linear

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make(x @ y, (a, b), backward)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else out + b


# ------------------------------------------------------------ fused primitives

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = np.exp(z)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward)


def layernorm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis; optional affine ``gamma``/``beta``."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        parents.append(beta)
        out = out + beta.data

    def backward(g):
        gx = g if gamma is None else g * gamma.data
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gin]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return make(out, tuple(parents), backward)


@numba.njit(cache=True)
def _softmax_grad_rows(dp, e, c, tiny):
    # dp <- e * (dp - c), row by row; e are unnormalized weights. Entries below
    # ``tiny`` are flushed to zero so later matmuls never touch subnormals.
    n, m = dp.shape
    for i in range(n):
        ci = c[i]
        for j in range(m):
            x = e[i, j] * (dp[i, j] - ci)
            dp[i, j] = x if abs(x) > tiny else 0.0


# Lowest shifted score fed to exp: keeps every weight a normal float (subnormal
# arithmetic is ~10x slower) at a cost below 1e-26 relative to the row maximum.
_EXP_FLOOR = {np.dtype(np.float32): -60.0, np.dtype(np.float64): -600.0}


def attention(q, k, v, key_mask=None, scale=None, dtype=None):
    """softmax(q kᵀ · scale + mask) v over the last two axes.

    ``key_mask`` is a boolean array broadcastable to (..., 1, Tk); False keys
    receive zero weight. Unnormalized weights are kept for backward only.
    ``dtype`` (e.g. float32) sets the working precision; results are float64.
    """
    d = q.data.shape[-1]
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    dt = np.dtype(np.float64 if dtype is None else dtype)
    floor = _EXP_FLOOR.get(dt, -60.0)
    qd, kd, vd = (t.data.astype(dt, copy=False) for t in (q, k, v))
    e = (qd * dt.type(scale)) @ np.swapaxes(kd, -1, -2)
    if key_mask is not None:
        e = np.where(key_mask, e, -np.inf).astype(dt, copy=False)
    e -= e.max(axis=-1, keepdims=True)
    np.maximum(e, floor, out=e)
    np.exp(e, out=e)
    if key_mask is not None:
        e *= np.asarray(key_mask, dtype=dt)
    z = e.sum(axis=-1, keepdims=True)
    out = (e @ vd) / z

    def backward(g):
        g = g.astype(dt, copy=False)
        gz = g / z
        gv = np.swapaxes(e, -1, -2) @ gz if v.requires_grad else None
        dp = gz @ np.swapaxes(vd, -1, -2)
        c = (g * out).sum(axis=-1) / z[..., 0]
        _softmax_grad_rows(dp.reshape(-1, dp.shape[-1]), np.ascontiguousarray(e).reshape(-1, e.shape[-1]),
                           c.reshape(-1), float(np.finfo(dt).tiny) * 1e8)
        gq = (dp @ kd) * scale if q.requires_grad else None
        gk = (np.swapaxes(dp, -1, -2) @ qd) * scale if k.requires_grad else None
        cast = lambda a: None if a is None else a.astype(np.float64, copy=False)
        return cast(gq), cast(gk), cast(gv)

    return make(out.astype(np.float64, copy=False), (q, k, v), backward)


def segment_max(x, seg, n_seg):
    """Per-segment elementwise max over rows of a 2-D tensor.

    Gradient is routed to the first row attaining the max in each
    (segment, channel) pair.
    """
    seg = np.asarray(seg, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    xs = x.data[order]
    ss = seg[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    if len(starts) != n_seg:
        raise ValueError("segment ids must cover 0..n_seg-1")
    out = np.maximum.reduceat(xs, starts, axis=0)
    rows = np.arange(len(ss))[:, None] + np.zeros((1, xs.shape[1]), dtype=np.int64)
    rows = np.where(xs == out[ss], rows, len(ss))
    arg = order[np.minimum.reduceat(rows, starts, axis=0)]
    cols = np.broadcast_to(np.arange(xs.shape[1]), arg.shape)
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[arg, cols] = g
        return (full,)

    return make(out, (x,), backward)


def segment_mean(x, seg, n_seg):
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    out = _scatter_rows(n_seg, seg, x.data) / counts.reshape((-1,) + (1,) * (x.ndim - 1))
    return make(out, (x,), lambda g: ((g / counts.reshape(g.shape[:1] + (1,) * (g.ndim - 1)))[seg],))


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x.data)):
        bad = np.argwhere(~np.isfinite(x.data))
        raise FloatingPointError(f"non-finite values in {what} at {bad[:5].tolist()}")
    return x
