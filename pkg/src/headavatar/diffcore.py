"""Dense numpy tensors with reverse-mode automatic differentiation.

Every backward rule is itself written with ``Tensor`` ops, so passing
``create_graph=True`` to :func:`grad` records the backward pass and allows a
second differentiation (needed by the R1 penalty on the discriminator).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def enable_grad():
    """Record graphs even inside ``no_grad`` (for losses that differentiate internally)."""
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(DEFAULT_DTYPE)
        elif dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _wrap_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap_const(b, a)
    b = as_tensor(b)
    return _wrap_const(a, b), b


def _make(data, parents, backward) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(neg(g), sb)))


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape),
                            _unbroadcast(mul(g, a), b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def back(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(out_data, (a, b), back)


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),))


def power(a, p: float):
    p = float(p)
    return _make(a.data ** p, (a,),
                 lambda g: (mul(g, mul(power(a, p - 1.0), p)),))


def exp(a):
    out = None

    def back(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), back)
    return out


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    out = None

    def back(g):
        return (div(g, mul(out, 2.0)),)

    out = _make(np.sqrt(a.data), (a,), back)
    return out


def sin(a):
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a):
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a):
    out = None

    def back(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), back)
    return out


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = None

    def back(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(_sigmoid_np(a.data), (a,), back)
    return out


def softplus(a):
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a):
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),))


def leaky_relu(a, slope=0.2):
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (mul(g, scale),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a)
    b = _wrap_const(b, a)
    fa = cond.astype(a.dtype)
    fb = 1.0 - fa
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(mul(g, fa), a.shape),
                            _unbroadcast(mul(g, fb), b.shape)))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def broadcast_to(a, shape):
    shape = tuple(shape)
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_unbroadcast(g, src),))


def reshape(a, shape):
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        outs = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            outs.append(getitem(g, tuple(sl)))
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0
                else reshape(t, t.shape + (1,)) for t in tensors]
    return concat(expanded, axis=axis)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    if isinstance(idx, Tensor):
        idx = idx.data
    if isinstance(idx, np.ndarray) and idx.dtype.kind == "f":
        raise TypeError("index arrays must be integer or boolean")
    shape = a.shape
    return _make(a.data[idx], (a,), lambda g: (index_add(shape, idx, g),))


def index_add(shape, idx, src):
    """Zeros of ``shape`` with ``src`` scatter-added at ``idx`` (adjoint of getitem)."""
    out = np.zeros(shape, dtype=src.dtype)
    if _is_basic_index(idx):
        out[idx] += src.data
    elif isinstance(idx, np.ndarray) and idx.dtype.kind in "iu" and idx.ndim == 1 \
            and len(shape) >= 1:
        flat_src = src.data.reshape(idx.shape[0], -1)
        flat_out = out.reshape(shape[0], -1)
        for c in range(flat_out.shape[1]):
            flat_out[:, c] = np.bincount(idx, weights=flat_src[:, c], minlength=shape[0])
    else:
        np.add.at(out, idx, src.data)
    return _make(out, (src,), lambda g: (getitem(g, idx),))


def cumsum(a, axis=-1):
    def back(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), back)


def flip(a, axis):
    return _make(np.flip(a.data, axis=axis), (a,), lambda g: (flip(g, axis),))


def pad(a, widths):
    """Zero padding; ``widths`` as in ``np.pad``."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (getitem(g, sl),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        if len(sb) == 1:
            ga = mul(reshape(g, g.shape + (1,)), b)
            gb = _unbroadcast(tsum(mul(reshape(g, g.shape + (1,)), a),
                                   axis=tuple(range(a.ndim - 1))), sb)
            return _unbroadcast(ga, sa), gb
        if len(sa) == 1:
            ga = tsum(mul(reshape(g, g.shape[:-1] + (1, g.shape[-1])), b), axis=-1)
            ga = _unbroadcast(ga, sa)
            gb = mul(reshape(a, (-1, 1)), reshape(g, g.shape[:-1] + (1, g.shape[-1])))
            return ga, _unbroadcast(gb, sb)
        ga = _unbroadcast(matmul(g, swapaxes(b)), sa)
        gb = _unbroadcast(matmul(swapaxes(a), g), sb)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), back)


def swapaxes(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def im2col(x, k: int, stride: int = 1):
    """(N, C, H, W) already padded -> (N, H'*W', C*k*k) patch matrix."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)
    shape = x.shape
    return _make(cols, (x,), lambda g: (col2im(g, shape, k, stride),))


def col2im(cols, shape, k: int, stride: int = 1):
    n, c, h, w = shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    g6 = cols.data.reshape(n, ho, wo, c, k, k)
    out = np.zeros(shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                g6[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return _make(out, (cols,), lambda g: (im2col(g, k, stride),))


def conv2d(x, weight, bias=None, stride: int = 1, pad_: int | None = None):
    """Cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with ``weight`` (O,C,k,k).

    ``pad_`` defaults to ``k // 2`` (shape preserving for stride 1).
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("square kernels only")
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {ci}")
    p = k // 2 if pad_ is None else pad_
    if p:
        x = pad(x, [(0, 0), (0, 0), (p, p), (p, p)])
    n, _, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = im2col(x, k, stride)
    out = matmul(cols, transpose(reshape(weight, (o, ci * k * k)), (1, 0)))
    if bias is not None:
        out = out + bias
    out = reshape(transpose(out, (0, 2, 1)), (n, o, ho, wo))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def modulated_conv2d(x, weight, style, demodulate=True, bias=None, eps=1e-8):
    """Scale ``weight`` per input channel by ``style``, optionally demodulate, convolve."""
    weight = as_tensor(weight)
    style = as_tensor(style)
    if style.shape != (weight.shape[1],):
        raise ShapeError(f"style length {style.shape} does not match C_in={weight.shape[1]}")
    w = mul(weight, reshape(style, (1, -1, 1, 1)))
    if demodulate:
        d = power(add(tsum(mul(w, w), axis=(1, 2, 3), keepdims=True), eps), -0.5)
        w = mul(w, d)
    return conv2d(x, w, bias=bias)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_tensor(x)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    y = reshape(x, lead + (h, 1, w, 1))
    y = broadcast_to(y, lead + (h, 2, w, 2))
    return reshape(y, lead + (2 * h, 2 * w))


def avgpool2x(x):
    x = as_tensor(x)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    y = reshape(x, lead + (h // 2, 2, w // 2, 2))
    return mean(y, axis=(-3, -1))


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------
def bilinear_sample(plane, uv):
    """Sample ``plane`` (C,H,W) at ``uv`` (N,2) or (2,) in [0,1]^2.

    Nodes sit at pixel centres ``((i + 0.5)/W, (j + 0.5)/H)``; u indexes the
    width axis, v the height axis.  Beyond the outer nodes the grid is
    zero-padded, and queries outside [0,1]^2 return exactly zero.
    """
    plane = as_tensor(plane)
    uv = as_tensor(uv)
    single = uv.ndim == 1
    if single:
        uv = reshape(uv, (1, 2))
    c, h, w = plane.shape
    flat = reshape(transpose(pad(plane, [(0, 0), (1, 1), (1, 1)]), (1, 2, 0)),
                   ((h + 2) * (w + 2), c))
    u = uv.data[:, 0]
    v = uv.data[:, 1]
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1) & np.isfinite(u) & np.isfinite(v)
    fx = uv[:, 0] * float(w) + 0.5          # padded coordinate of the query
    fy = uv[:, 1] * float(h) + 0.5
    x0 = np.clip(np.floor(fx.data), 0, w).astype(np.int64)
    y0 = np.clip(np.floor(fy.data), 0, h).astype(np.int64)
    tx = fx - x0.astype(uv.dtype)
    ty = fy - y0.astype(uv.dtype)
    keep = inside.astype(uv.dtype)
    tx = where(inside, tx, 0.0)
    ty = where(inside, ty, 0.0)
    stride = w + 2
    i00 = y0 * stride + x0
    out = (getitem(flat, i00) * reshape((1 - tx) * (1 - ty), (-1, 1))
           + getitem(flat, i00 + 1) * reshape(tx * (1 - ty), (-1, 1))
           + getitem(flat, i00 + stride) * reshape((1 - tx) * ty, (-1, 1))
           + getitem(flat, i00 + stride + 1) * reshape(tx * ty, (-1, 1)))
    out = out * keep[:, None]
    if single:
        out = reshape(out, (c,))
    return out


def trilinear_sample(volume, xyz, lo=-1.0, hi=1.0):
    """Sample a scalar ``volume`` (D,D,D) indexed [x, y, z] at ``xyz`` (N,3) or (3,).

    The grid covers the cube [lo, hi]^3 with nodes at cell centres.  Between
    the outer nodes and the cube faces the value is held at the border node,
    so a constant volume reads constant everywhere inside; points outside the
    cube return 0.
    """
    volume = as_tensor(volume)
    xyz = as_tensor(xyz)
    single = xyz.ndim == 1
    if single:
        xyz = reshape(xyz, (1, 3))
    d = volume.shape[0]
    if d < 2:
        raise ShapeError("volume needs at least 2 nodes per axis")
    flat = reshape(volume, (d ** 3,))
    inside = np.all((xyz.data >= lo) & (xyz.data <= hi), axis=1)
    f = (xyz - lo) * (d / (hi - lo)) - 0.5          # node coordinates 0 .. d-1
    fd = f.data
    f = where((fd < 0) | ~inside[:, None], 0.0, where(fd > d - 1, float(d - 1), f))
    i0 = np.clip(np.floor(f.data), 0, d - 2).astype(np.int64)
    t = f - i0.astype(xyz.dtype)
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    base = (i0[:, 0] * d + i0[:, 1]) * d + i0[:, 2]
    out = None
    for dx in (0, 1):
        wx = tx if dx else 1 - tx
        for dy in (0, 1):
            wy = ty if dy else 1 - ty
            for dz in (0, 1):
                wz = tz if dz else 1 - tz
                term = getitem(flat, base + (dx * d + dy) * d + dz) * (wx * wy * wz)
                out = term if out is None else out + term
    out = out * inside.astype(xyz.dtype)
    if single:
        out = reshape(out, ())
    return out


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------
def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, inputs, create_graph: bool = False):
    """Gradients of scalar ``loss`` wrt each tensor in ``inputs`` (zeros if unreachable)."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): Tensor(np.ones_like(loss.data))}
    if loss.requires_grad:
        with _grad_mode(create_graph):
            for node in reversed(_toposort(loss)):
                g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


def backward(loss: Tensor, params=None) -> dict:
    """Populate ``.grad`` (ndarray) on ``params`` and return {id(param): grad}.

    Without ``params`` every requires-grad leaf reachable from ``loss`` is
    used.  Repeated calls recompute from scratch and give identical results.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = [n for n in _toposort(loss) if n._backward is None and n.requires_grad] \
            if loss.requires_grad else []
    gs = grad(loss, params)
    result = {}
    for p, g in zip(params, gs):
        p.grad = g.data
        result[id(p)] = g.data
    return result


@dataclass
class GradReport:
    name: str
    max_rel_error: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def __str__(self):
        errs = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_error.items())
        excl = sum(self.excluded.values())
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({excl} non-smooth points excluded)" if excl else ""
        return f"[{status}] {self.name}: {errs}{extra}"


def grad_check(fn, inputs, eps=1e-5, tol=1e-4, name="op", kink_tol=1e-3):
    """Compare analytic gradients of ``fn(*tensors) -> scalar`` with central differences.

    Coordinates where the one-sided differences disagree (a kink, e.g. relu
    at 0) are flagged and excluded.  The relative error of each input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
    Never raises on a mismatch; inspect ``report.passed``.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    analytic = [g.data for g in grad(loss, tensors)]
    f0 = float(loss.data)
    report = GradReport(name=name, tol=tol)

    def f_at(i, flat_idx, delta):
        vals = [t.data for t in tensors]
        a = vals[i].copy()
        a.flat[flat_idx] += delta
        args = [Tensor(v) for v in vals]
        args[i] = Tensor(a)
        with no_grad():
            return float(fn(*args).data)

    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        excluded = np.zeros(a.shape, dtype=bool)
        for j in range(a.size):
            fp = f_at(i, j, eps)
            fm = f_at(i, j, -eps)
            fwd = (fp - f0) / eps
            bwd = (f0 - fm) / eps
            num.flat[j] = (fp - fm) / (2 * eps)
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(num.flat[j])):
                excluded.flat[j] = True
        an = analytic[i]
        diff = np.abs(an - num)[~excluded]
        scale = max(np.abs(an[~excluded]).max(initial=0.0),
                    np.abs(num[~excluded]).max(initial=0.0), 1e-8)
        report.max_rel_error[f"arg{i}"] = float(diff.max(initial=0.0) / scale)
        report.excluded[f"arg{i}"] = int(excluded.sum())
    return report


class Adam:
    """Adam over a list of leaf tensors; parameter groups may carry their own lr."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    @property
    def params(self):
        return [p for ps, _ in self.groups for p in ps]

    def step(self, grads: dict, scale=1.0):
        """One update; ``scale`` multiplies every group's lr (schedules)."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for ps, lr in self.groups:
            for p in ps:
                g = grads.get(id(p))
                if g is None:
                    continue
                m = self.m.get(id(p))
                if m is None:
                    m = self.m[id(p)] = np.zeros_like(p.data)
                    self.v[id(p)] = np.zeros_like(p.data)
                v = self.v[id(p)]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                p.data = p.data - scale * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, names: dict):
        """Moments keyed by parameter name, for checkpointing."""
        out = {}
        for p in self.params:
            if id(p) in self.m:
                out[f"adam_m/{names[id(p)]}"] = self.m[id(p)]
                out[f"adam_v/{names[id(p)]}"] = self.v[id(p)]
        return out

    def load_state_arrays(self, arrays: dict, names: dict, t: int):
        self.t = t
        for p in self.params:
            key = names[id(p)]
            if f"adam_m/{key}" in arrays:
                self.m[id(p)] = arrays[f"adam_m/{key}"].copy()
                self.v[id(p)] = arrays[f"adam_v/{key}"].copy()
