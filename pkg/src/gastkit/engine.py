"""Minimal reverse-mode tensor engine on numpy.

Single-sample layout throughout: feature maps carry no batch axis, a 2D map
is [C, H, W] and a clip volume is [C, T, H, W]. Forward evaluation is plain
numpy (deterministic, single reduction order); backward is a closure per op
accumulated through a topological sweep.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape/axis mismatch between operands, names the offending axis."""


class ContractError(ValueError):
    """Caller violated an operation precondition."""


def _as_array(x, like=None):
    if isinstance(x, Tensor):
        return x.data
    dtype = like.dtype if like is not None else np.float32
    return np.asarray(x, dtype=dtype)


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, _parents=()):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._backward = None
        self._parents = _parents

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- autograd -----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward()

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return add(_wrap(other, self), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return self * (1.0 / other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x, like.data if isinstance(like, Tensor) else None))


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank-{ndim} tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bw():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = bw
    return out


def mul(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bw():
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = bw
    return out


def power(a, p):
    out = Tensor(a.data**p, _parents=(a,))

    def bw():
        a._accumulate(out.grad * p * a.data ** (p - 1))

    out._backward = bw
    return out


def exp(a):
    out = Tensor(np.exp(a.data), _parents=(a,))

    def bw():
        a._accumulate(out.grad * out.data)

    out._backward = bw
    return out


def log(a):
    out = Tensor(np.log(a.data), _parents=(a,))

    def bw():
        a._accumulate(out.grad / a.data)

    out._backward = bw
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0), _parents=(a,))

    def bw():
        # out > 0 iff input > 0, so the subgradient at 0 is 0
        a._accumulate(out.grad * (out.data > 0))

    out._backward = bw
    return out


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, _parents=(a,))

    def bw():
        a._accumulate(out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def softmax(a, axis):
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,))

    def bw():
        g = out.grad
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out._backward = bw
    return out


def matmul(a, b):
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def bw():
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    out._backward = bw
    return out


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = bw
    return out


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def bw():
        a._accumulate(out.grad.reshape(a.shape))

    out._backward = bw
    return out


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis)))
               for p in parts)


def getitem(a, idx):
    out = Tensor(a.data[idx], _parents=(a,))
    basic = _is_basic_index(idx)

    def bw():
        g = np.zeros_like(a.data)
        if basic:  # views cannot alias under basic indexing
            g[idx] += out.grad
        else:
            np.add.at(g, idx, out.grad)
        a._accumulate(g)

    out._backward = bw
    return out


def concat(tensors, axis):
    axis = _check_axis(axis, tensors[0].ndim)
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors)
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(out.grad[tuple(sl)])

    out._backward = bw
    return out


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# ---------------------------------------------------------------------------
# convolutions (im2col + BLAS)
# ---------------------------------------------------------------------------


def _conv_out(size, k, stride, pad, name):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise DimensionError(
            f"conv output collapsed on axis {name}: size {size}, kernel {k}, "
            f"stride {stride}, pad {pad}"
        )
    return out


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlate x[Cin,H,W] with w[Cout,Cin,kH,kW] plus bias b[Cout]."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {cin_w}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d kernel must be odd, got {kh}x{kw}")
    ho = _conv_out(h, kh, stride, padding, "H")
    wo = _conv_out(wd, kw, stride, padding, "W")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(cin * kh * kw, ho * wo)
    y = (w.data.reshape(cout, -1) @ cols2 + b.data[:, None]).reshape(cout, ho, wo)
    out = Tensor(y, _parents=(x, w, b))

    def bw():
        g = out.grad.reshape(cout, -1)
        w._accumulate((g @ cols2.T).reshape(w.shape))
        b._accumulate(g.sum(axis=1))
        gcols = (w.data.reshape(cout, -1).T @ g).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding]
        x._accumulate(gxp)

    out._backward = bw
    return out


def conv3d(x, w, b, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Cross-correlate x[Cin,T,H,W] with w[Cout,Cin,kT,kH,kW] plus bias."""
    cin, t, h, wd = x.shape
    cout, cin_w, kt, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv3d channel mismatch: input has {cin} channels, weight expects {cin_w}"
        )
    st, sh, sw = stride
    pt, ph, pw = padding
    to = _conv_out(t, kt, st, pt, "T")
    ho = _conv_out(h, kh, sh, ph, "H")
    wo = _conv_out(wd, kw, sw, pw, "W")

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = np.empty((cin, kt, kh, kw, to, ho, wo), dtype=x.dtype)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                cols[:, a, i, j] = xp[
                    :,
                    a : a + st * to : st,
                    i : i + sh * ho : sh,
                    j : j + sw * wo : sw,
                ]
    cols2 = cols.reshape(cin * kt * kh * kw, to * ho * wo)
    y = (w.data.reshape(cout, -1) @ cols2 + b.data[:, None]).reshape(cout, to, ho, wo)
    out = Tensor(y, _parents=(x, w, b))

    def bw():
        g = out.grad.reshape(cout, -1)
        w._accumulate((g @ cols2.T).reshape(w.shape))
        b._accumulate(g.sum(axis=1))
        gcols = (w.data.reshape(cout, -1).T @ g).reshape(cin, kt, kh, kw, to, ho, wo)
        gxp = np.zeros_like(xp)
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :,
                        a : a + st * to : st,
                        i : i + sh * ho : sh,
                        j : j + sw * wo : sw,
                    ] += gcols[:, a, i, j]
        sl = [slice(None)]
        for p in (pt, ph, pw):
            sl.append(slice(p, -p) if p else slice(None))
        x._accumulate(gxp[tuple(sl)])

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def _pool2_axis(d, ax):
    """Window-2 max along one axis; ties keep the earlier element."""
    n = d.shape[ax]
    sh = list(d.shape)
    sh[ax] = n // 2
    sh.insert(ax + 1, 2)
    v = d.reshape(sh)
    sl0 = [slice(None)] * len(sh)
    sl1 = [slice(None)] * len(sh)
    sl0[ax + 1], sl1[ax + 1] = 0, 1
    a, b = v[tuple(sl0)], v[tuple(sl1)]
    mask = a >= b
    return np.where(mask, a, b), mask, sh, tuple(sl0), tuple(sl1)


def _maxpool_lastdims(x, windows):
    """Non-overlapping max pool over the trailing len(windows) axes.

    Windows are 1 or 2 (all the network needs); pooled sequentially from the
    last axis so tie-breaking matches row-major first-max order.
    """
    lead = x.ndim - len(windows)
    for d, w in enumerate(windows):
        if w not in (1, 2):
            raise ContractError(f"maxpool window {w} unsupported (use 1 or 2)")
        if x.shape[lead + d] % w != 0:
            raise DimensionError(
                f"maxpool axis {lead + d} size {x.shape[lead + d]} not divisible by {w}"
            )
    d = x.data
    steps = []
    for i in range(len(windows) - 1, -1, -1):
        if windows[i] == 1:
            continue
        ax = lead + i
        d, mask, sh, sl0, sl1 = _pool2_axis(d, ax)
        steps.append((ax, mask, sh, sl0, sl1))
    out = Tensor(d, _parents=(x,))

    def bw():
        g = out.grad
        for ax, mask, sh, sl0, sl1 in reversed(steps):
            gv = np.zeros(sh, dtype=g.dtype)
            gv[sl0] = g * mask
            gv[sl1] = g * ~mask
            flat = sh[:ax] + [sh[ax] * 2] + sh[ax + 2 :]
            g = gv.reshape(flat)
        x._accumulate(g)

    out._backward = bw
    return out


def maxpool2d(x, window=2):
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d expects [C,H,W], got rank {x.ndim}")
    return _maxpool_lastdims(x, (window, window))


def maxpool3d(x, window=(1, 2, 2)):
    if x.ndim != 4:
        raise DimensionError(f"maxpool3d expects [C,T,H,W], got rank {x.ndim}")
    return _maxpool_lastdims(x, tuple(window))


def _bilinear_matrix(n_out, n_in, factor, dtype):
    """Dense interpolation matrix [n_out, n_in], align_corners=False."""
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), i0] += 1.0 - w1
    m[np.arange(n_out), i1] += w1
    return m


def upsample_bilinear(x, factor):
    """Bilinear resize of the trailing two axes by an arbitrary factor.

    Separable: out = My @ x @ Mx^T with per-axis interpolation matrices, so
    both passes are BLAS matmuls.
    """
    *lead, h, w = x.shape
    ho, wo = int(round(h * factor)), int(round(w * factor))
    my = _bilinear_matrix(ho, h, factor, x.dtype)
    mx = _bilinear_matrix(wo, w, factor, x.dtype)
    d = x.data.reshape(-1, h, w)
    out = Tensor((my @ d @ mx.T).reshape(*lead, ho, wo), _parents=(x,))

    def bw():
        g = out.grad.reshape(-1, ho, wo)
        x._accumulate((my.T @ g @ mx).reshape(x.shape))

    out._backward = bw
    return out


def batchnorm(x, gamma, beta, running_mean, running_var, training,
              momentum=0.1, eps=1e-5):
    """Per-channel normalization over all non-channel axes of one sample.

    running_mean/running_var are plain numpy arrays mutated in train mode;
    they never enter the autograd graph.
    """
    c = x.shape[0]
    axes = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = (x.data * x.data).mean(axis=axes) - mu * mu
        np.maximum(var, 0.0, out=var)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    # fused affine form y = a*x + b; xhat is recomputed in the backward pass
    a_ = (gamma.data * inv).reshape(bshape)
    b_ = (beta.data - gamma.data * inv * mu).reshape(bshape)
    out = Tensor(a_ * x.data + b_, _parents=(x, gamma, beta))
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def bw():
        g = out.grad
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        gxh = g * gamma.data.reshape(bshape)
        if training:
            # full backward through the per-sample statistics
            gx = (
                gxh
                - gxh.mean(axis=axes, keepdims=True)
                - xhat * (gxh * xhat).sum(axis=axes, keepdims=True) / n
            ) * inv.reshape(bshape)
        else:
            gx = gxh * inv.reshape(bshape)
        x._accumulate(gx)

    out._backward = bw
    return out
