"""Reverse-mode autodiff on float64 numpy arrays, plus the NCHW ops the
saliency model is assembled from.

Every op builds a closure that knows how to push gradients to its parents;
backward() runs the closures in reverse topological order. Gradients
accumulate additively, so tensors used in several places get the sum of
their downstream contributions.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (eval/predict paths)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _unbroadcast(g, shape):
    # reduce a gradient back to the shape it was broadcast from
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backprop", "name")

    def __init__(self, data, requires_grad=False, _prev=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._prev = tuple(_prev)
        self._backprop = None
        self.requires_grad = bool(requires_grad) or bool(self._prev)
        self.name = name

    # ------------------------------------------------------------- basics

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
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None:
                node._backprop()

    # ------------------------------------------------------------- arithmetic

    @staticmethod
    def _track(*parents):
        return _grad_enabled and any(p.requires_grad for p in parents)

    def __add__(self, other):
        other = _as_tensor(other)
        if not Tensor._track(self, other):
            return Tensor(self.data + other.data)
        out = Tensor(self.data + other.data,
                     _prev=tuple(p for p in (self, other) if p.requires_grad))

        def _bp():
            g = out.grad
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backprop = _bp
        return out

    __radd__ = __add__

    def __neg__(self):
        if not Tensor._track(self):
            return Tensor(-self.data)
        out = Tensor(-self.data, _prev=(self,))

        def _bp():
            self._accumulate(-out.grad)
        out._backprop = _bp
        return out

    def __sub__(self, other):
        other = _as_tensor(other)
        if not Tensor._track(self, other):
            return Tensor(self.data - other.data)
        out = Tensor(self.data - other.data,
                     _prev=tuple(p for p in (self, other) if p.requires_grad))

        def _bp():
            g = out.grad
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))
        out._backprop = _bp
        return out

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        if not Tensor._track(self, other):
            return Tensor(self.data * other.data)
        out = Tensor(self.data * other.data,
                     _prev=tuple(p for p in (self, other) if p.requires_grad))

        def _bp():
            g = out.grad
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backprop = _bp
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        if not Tensor._track(self, other):
            return Tensor(self.data / other.data)
        out = Tensor(self.data / other.data,
                     _prev=tuple(p for p in (self, other) if p.requires_grad))

        def _bp():
            g = out.grad
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2),
                                               other.data.shape))
        out._backprop = _bp
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        if not Tensor._track(self):
            return Tensor(self.data ** p)
        out = Tensor(self.data ** p, _prev=(self,))

        def _bp():
            self._accumulate(out.grad * p * self.data ** (p - 1))
        out._backprop = _bp
        return out

    # ------------------------------------------------------------- unary ops

    def exp(self):
        d = np.exp(self.data)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(out.grad * out.data)
        out._backprop = _bp
        return out

    def log(self):
        d = np.log(self.data)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(out.grad / self.data)
        out._backprop = _bp
        return out

    def sqrt(self):
        return self ** 0.5

    def tanh(self):
        d = np.tanh(self.data)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(out.grad * (1.0 - out.data ** 2))
        out._backprop = _bp
        return out

    def sigmoid(self):
        d = 1.0 / (1.0 + np.exp(-self.data))
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(out.grad * out.data * (1.0 - out.data))
        out._backprop = _bp
        return out

    def relu6(self):
        d = np.clip(self.data, 0.0, 6.0)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))
        mask = (self.data > 0.0) & (self.data < 6.0)

        def _bp():
            self._accumulate(out.grad * mask)
        out._backprop = _bp
        return out

    # ------------------------------------------------------------- shape ops

    def reshape(self, shape):
        d = self.data.reshape(shape)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(out.grad.reshape(self.data.shape))
        out._backprop = _bp
        return out

    def broadcast_to(self, shape):
        d = np.broadcast_to(self.data, shape)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))

        def _bp():
            self._accumulate(_unbroadcast(out.grad, self.data.shape))
        out._backprop = _bp
        return out

    def sum(self, axis=None, keepdims=False):
        d = self.data.sum(axis=axis, keepdims=keepdims)
        if not Tensor._track(self):
            return Tensor(d)
        out = Tensor(d, _prev=(self,))
        in_shape = self.data.shape

        def _bp():
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(a % len(in_shape) for a in axes)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, in_shape).copy()
                             if g.shape != in_shape else g)
        out._backprop = _bp
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not Tensor._track(*tensors):
        return Tensor(data)
    out = Tensor(data, _prev=tuple(t for t in tensors if t.requires_grad))
    sizes = [t.data.shape[axis] for t in tensors]

    def _bp():
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out.data.ndim
                sl[axis] = slice(offset, offset + n)
                t._accumulate(out.grad[tuple(sl)])
            offset += n
    out._backprop = _bp
    return out


# ------------------------------------------------------------------ conv2d

def _corr_raw(x, w, stride, padding, groups):
    """Grouped cross-correlation on raw arrays. padding is (ph, pw)."""
    n, c, h, wdt = x.shape
    o, cg, kh, kw = w.shape
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wdt + 2 * pw - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = w.reshape(groups, o // groups, cg, kh, kw)
    out = np.einsum("ngchwkl,gockl->ngohw", win, wg, optimize=True)
    return out.reshape(n, o, ho, wo), xp


def _conv2d_input_grad(gout, w, stride, padding, groups, in_hw):
    """Gradient wrt the conv input: dilate, pad, correlate with the
    spatially flipped, channel-swapped kernel."""
    n, o, ho, wo = gout.shape
    _, cg, kh, kw = w.shape
    ph, pw = padding
    h, wdt = in_hw
    if stride > 1:
        gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gd[:, :, ::stride, ::stride] = gout
    else:
        gd = gout
    # asymmetric extension: the right side also covers the floor remainder
    rh = (h + 2 * ph - kh) % stride
    rw = (wdt + 2 * pw - kw) % stride
    ext = ((kh - 1 - ph, kh - 1 - ph + rh), (kw - 1 - pw, kw - 1 - pw + rw))
    pads = tuple((max(0, a), max(0, b)) for a, b in ext)
    gd = np.pad(gd, ((0, 0), (0, 0)) + pads)
    crops = tuple((max(0, -a), max(0, -b)) for a, b in ext)
    (ct, cb), (cl, cr) = crops
    gd = gd[:, :, ct:gd.shape[2] - cb, cl:gd.shape[3] - cr]
    wt = w.reshape(groups, o // groups, cg, kh, kw)
    wt = wt.transpose(0, 2, 1, 3, 4)[:, :, :, ::-1, ::-1]
    wt = np.ascontiguousarray(wt).reshape(groups * cg, o // groups, kh, kw)
    gx, _ = _corr_raw(gd, wt, 1, (0, 0), groups)
    return gx


def conv2d(x, w, bias=None, *, stride=1, padding=0, groups=1):
    """2D cross-correlation over NCHW input. Weight is (out, in/groups, kh, kw);
    zero padding, positive integer stride."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    n, c, h, wdt = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ValueError(f"channels ({c} in, {o} out) not divisible by groups={groups}")
    if cg * groups != c:
        raise ValueError(f"weight expects {cg * groups} input channels, got {c}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ValueError("kernel larger than padded input")
    pad = (padding, padding)
    out_data, xp = _corr_raw(x.data, w.data, stride, pad, groups)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias must have shape ({o},)")
        out_data = out_data + bias.data.reshape(1, o, 1, 1)
    parents = [p for p in (x, w, bias) if p is not None]
    if not Tensor._track(*parents):
        return Tensor(out_data)
    out = Tensor(out_data, _prev=tuple(p for p in parents if p.requires_grad))

    def _bp():
        g = out.grad
        if x.requires_grad:
            x._accumulate(_conv2d_input_grad(g, w.data, stride, pad, groups, (h, wdt)))
        if w.requires_grad:
            ho, wo = g.shape[2], g.shape[3]
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            win = win.reshape(n, groups, cg, ho, wo, kh, kw)
            gw = np.einsum("ngchwkl,ngohw->gockl", win,
                           g.reshape(n, groups, o // groups, ho, wo), optimize=True)
            w._accumulate(gw.reshape(o, cg, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
    out._backprop = _bp
    return out


# ------------------------------------------------------------------ upsample

@lru_cache(maxsize=256)
def resize_matrix(n_in, n_out):
    """Linear interpolation matrix (n_out, n_in): half-pixel source centers,
    edges clamped."""
    a = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        lo = int(np.floor(src))
        f = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        a[i, lo_c] += 1.0 - f
        a[i, hi_c] += f
    a.setflags(write=False)
    return a


def _interp_matrix(n_in, factor):
    return resize_matrix(n_in, n_in * factor)


def upsample(x, factor, *, mode="nearest"):
    """Spatial upsampling by an integer factor.  nearest repeats pixels;
    bilinear interpolates with half-pixel source centers (not corner-aligned)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError("upsample expects NCHW input")
    if not isinstance(factor, int) or factor < 1:
        raise ValueError("factor must be a positive integer")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown mode {mode!r}")
    n, c, h, w = x.shape
    if mode == "nearest":
        d = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
        if not Tensor._track(x):
            return Tensor(d)
        out = Tensor(d, _prev=(x,))

        def _bp():
            g = out.grad.reshape(n, c, h, factor, w, factor)
            x._accumulate(g.sum(axis=(3, 5)))
        out._backprop = _bp
        return out

    ah = _interp_matrix(h, factor)
    aw = _interp_matrix(w, factor)
    d = np.matmul(np.matmul(ah, x.data), aw.T)
    if not Tensor._track(x):
        return Tensor(d)
    out = Tensor(d, _prev=(x,))

    def _bp():
        x._accumulate(np.matmul(np.matmul(ah.T, out.grad), aw))
    out._backprop = _bp
    return out


# ------------------------------------------------------------------ batch norm

@dataclass
class BNStats:
    """Running statistics buffer for one normalization layer."""
    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def create(channels):
        return BNStats(np.zeros(channels), np.ones(channels))

    def copy(self):
        return BNStats(self.mean.copy(), self.var.copy())


def batch_stats_normalize(x, gamma, beta, stats, *, momentum=0.1, eps=1e-5,
                          training=True):
    """Per-channel normalization.  Training mode standardizes by batch
    statistics (population variance) and folds them into the running stats
    with run <- (1-momentum)*run + momentum*batch; eval mode uses the
    running stats unchanged.  Returns (output, stats)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    g = gamma.reshape((1, c, 1, 1))
    b = beta.reshape((1, c, 1, 1))
    if training:
        m = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - m
        v = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        xn = centered / ((v + eps) ** 0.5)
        stats.mean[:] = (1.0 - momentum) * stats.mean + momentum * m.data.ravel()
        stats.var[:] = (1.0 - momentum) * stats.var + momentum * v.data.ravel()
    else:
        rm = Tensor(stats.mean.reshape(1, c, 1, 1))
        rv = Tensor(stats.var.reshape(1, c, 1, 1))
        xn = (x - rm) / ((rv + eps) ** 0.5)
    return xn * g + b, stats


# ------------------------------------------------------------------ softmax

def softmax_spatial(x):
    """Softmax over the H*W locations of a single-channel NCHW map; each
    sample becomes a spatial probability distribution."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("softmax_spatial expects shape (N, 1, H, W)")
    shift = x.data.max(axis=(2, 3), keepdims=True)  # value-invariant, kept off the tape
    e = (x - Tensor(shift)).exp()
    return e / e.sum(axis=(2, 3), keepdims=True)


# ------------------------------------------------------------------ dropout

def dropout2d(x, p, *, training, rng_seed=0):
    """Channel dropout: zero whole (sample, channel) planes with probability p
    and scale survivors by 1/(1-p).  Mask comes from a counter-based generator
    keyed by rng_seed, so the same seed reproduces the same mask."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError("p must be in [0, 1)")
    if not training or p == 0.0:
        return x
    n, c = x.shape[0], x.shape[1]
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    keep = (rng.random((n, c)) >= p).astype(np.float64)
    mask = keep.reshape(n, c, 1, 1) / (1.0 - p)
    return x * Tensor(mask)


def dropout_key(seed, tag, step):
    """Stable 64-bit dropout key from (run seed, layer tag, step)."""
    import hashlib
    h = hashlib.blake2b(f"{seed}/{tag}/{step}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


# ------------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_input: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def grad_check(fn, inputs, tol=1e-4, h=1e-5, seed=0, sample=None):
    """Compare closure gradients of fn(*inputs) against central differences.

    The output is contracted against a fixed random cotangent so non-scalar
    ops are exercised along every output direction.  Relative error is
    |a - n| / max(|a| + |n|, 1e-4); failures are collected, not raised.
    sample limits the finite-difference probe to that many coordinates per
    input (seeded choice), for expensive graphs.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(out.shape)
    (out * Tensor(v)).sum().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]
    for t in inputs:
        t.grad = None

    def scalar():
        with no_grad():
            return float((fn(*inputs).data * v).sum())

    per_input = []
    failures = []
    for idx, t in enumerate(inputs):
        flat = t.data.ravel()
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        worst = 0.0
        for j in coords:
            saved = flat[j]
            flat[j] = saved + h
            f_plus = scalar()
            flat[j] = saved - h
            f_minus = scalar()
            flat[j] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[idx].ravel()[j]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)
            if rel > worst:
                worst = rel
            if rel > tol:
                failures.append(f"input {idx} coord {int(j)}: "
                                f"analytic {a:.6g} vs numeric {numeric:.6g} (rel {rel:.3g})")
        per_input.append(worst)
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(passed=not failures, max_rel_err=max_err,
                           per_input=per_input, failures=failures)
