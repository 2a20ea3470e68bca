"""Small dense-tensor library with reverse-mode differentiation.

Tensors wrap numpy arrays and are immutable after construction. Every
primitive records its inputs and a local derivative rule when any input
participates in gradient tracking; ``backward`` replays the recorded
graph in reverse topological order, visiting each node exactly once.

Two precision regimes are used throughout the package: float32 for
training and float64 inside ``checking()`` blocks, where primitives also
validate that their inputs are finite (finite differences need the
headroom and the early failure).

Broadcasting is restricted to scalar-vs-tensor; anything else must be
reshaped explicitly so each derivative rule stays auditable.

Calling ``backward`` a second time on the same recorded graph is
supported and recomputes the same gradients from scratch (leaf ``grad``
fields are overwritten, not accumulated).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive."""


_CHECKING = False
_GRAD_ENABLED = True


@contextmanager
def checking():
    """Run at 64-bit precision with finiteness validation on every primitive."""
    global _CHECKING
    prev = _CHECKING
    _CHECKING = True
    try:
        yield
    finally:
        _CHECKING = prev


@contextmanager
def no_grad():
    """Disable graph recording (inference / plain evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def default_dtype():
    return np.float64 if _CHECKING else np.float32


def _validate_finite(name, *arrays):
    if _CHECKING:
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite input in checking mode")


class Tensor:
    """Dense n-dimensional array of reals, optionally on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def _tracked(self):
        return self.requires_grad or bool(self._parents)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routes through the primitive suite below
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    """Wrap python scalars; enforce equal shapes or scalar-vs-tensor."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype) if not isinstance(b, Tensor) else b
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"operand shapes {a.shape} and {b.shape} do not match "
                         "(only scalar-vs-tensor broadcasting is supported)")
    return a, b


def _reduce_to(grad, shape):
    """Collapse a broadcast gradient back to a scalar operand's shape."""
    if shape == ():
        return np.asarray(grad.sum())
    return grad


def _make(data, srcs_vjps):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED:
        recorded = [(s, v) for s, v in srcs_vjps if s._tracked()]
        if recorded:
            out._parents = tuple(s for s, _ in recorded)
            out._vjps = tuple(v for _, v in recorded)
    return out


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents precede consumers


def backward(root):
    """Propagate d(root)/d(leaf) to every requires_grad tensor on the tape.

    ``root`` must be scalar. Repeating the call on the same graph
    overwrites the previously stored gradients with identical values.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor root")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    for t in order:
        if t.requires_grad:
            t.grad = None
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        for p, vjp in zip(t._parents, t._vjps):
            pg = vjp(g)
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitive suite
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)
    _validate_finite("add", a.data, b.data)
    out = a.data + b.data
    return _make(out, [(a, lambda g: _reduce_to(g, a.shape)),
                       (b, lambda g: _reduce_to(g, b.shape))])


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _validate_finite("sub", a.data, b.data)
    out = a.data - b.data
    return _make(out, [(a, lambda g: _reduce_to(g, a.shape)),
                       (b, lambda g: _reduce_to(-g, b.shape))])


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _validate_finite("mul", a.data, b.data)
    out = a.data * b.data
    return _make(out, [(a, lambda g: _reduce_to(g * b.data, a.shape)),
                       (b, lambda g: _reduce_to(g * a.data, b.shape))])


def div(a, b):
    a, b = _coerce_pair(a, b)
    _validate_finite("div", a.data, b.data)
    out = a.data / b.data
    return _make(out, [(a, lambda g: _reduce_to(g / b.data, a.shape)),
                       (b, lambda g: _reduce_to(-g * a.data / (b.data * b.data), b.shape))])


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, [(a, lambda g: -g)])


def exp(a):
    a = as_tensor(a)
    _validate_finite("exp", a.data)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a):
    a = as_tensor(a)
    _validate_finite("log", a.data)
    out = np.log(a.data)
    return _make(out, [(a, lambda g: g / a.data)])


def sqrt(a):
    a = as_tensor(a)
    _validate_finite("sqrt", a.data)
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * (0.5 / out))])


def relu(a):
    a = as_tensor(a)
    _validate_finite("relu", a.data)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype),
                 [(a, lambda g: g * mask)])


def maximum(a, c):
    """Elementwise max with a constant (subgradient 0 on the tied boundary)."""
    a = as_tensor(a)
    c = float(c)
    _validate_finite("maximum", a.data)
    mask = a.data > c
    return _make(np.maximum(a.data, c), [(a, lambda g: g * mask)])


def sigmoid(a):
    a = as_tensor(a)
    _validate_finite("sigmoid", a.data)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def tsum(a, axis=None):
    a = as_tensor(a)
    _validate_finite("sum", a.data)
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True)
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.data.dtype, copy=True)

    return _make(out, [(a, vjp)])


def tmean(a, axis=None):
    a = as_tensor(a)
    _validate_finite("mean", a.data)
    n = a.data.size if axis is None else a.shape[axis]
    out = np.asarray(a.data.mean(axis=axis))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.shape).astype(a.data.dtype, copy=True)
        return np.broadcast_to(np.expand_dims(g / n, axis), a.shape).astype(a.data.dtype, copy=True)

    return _make(out, [(a, vjp)])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires (m,k) @ (k,n), got {a.shape} and {b.shape}")
    _validate_finite("matmul", a.data, b.data)
    out = a.data @ b.data
    return _make(out, [(a, lambda g: g @ b.data.T),
                       (b, lambda g: a.data.T @ g)])


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def take(a, key):
    """Gather by any numpy index expression; backward scatter-adds."""
    a = as_tensor(a)
    if isinstance(key, np.ndarray):
        key = key.copy()
    elif isinstance(key, tuple):
        key = tuple(k.copy() if isinstance(k, np.ndarray) else k for k in key)
    out = a.data[key]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return z

    return _make(np.asarray(out), [(a, vjp)])


def sqdist(a, b):
    """Squared L2 distance along the last axis.

    ``a`` has shape (..., d); ``b`` either matches exactly or is a bare
    (d,) vector shared across all leading positions of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("sqdist operands must have at least one axis")
    shared = b.shape == a.shape[-1:] and a.ndim > 1
    if not shared and a.shape != b.shape:
        raise ShapeError(f"sqdist shapes {a.shape} and {b.shape} do not conform")
    _validate_finite("sqdist", a.data, b.data)
    diff = a.data - b.data
    out = np.asarray((diff * diff).sum(axis=-1))

    def vjp_a(g):
        return 2.0 * diff * np.expand_dims(g, -1)

    def vjp_b(g):
        full = -2.0 * diff * np.expand_dims(g, -1)
        if shared:
            return full.reshape(-1, b.shape[0]).sum(axis=0)
        return full

    return _make(out, [(a, vjp_a), (b, vjp_b)])


def conv2d(x, w, b=None, stride=1):
    """2-D convolution over a (c_in, h, w) map with zero padding.

    Kernel extents must be odd; padding of k//2 preserves spatial size at
    stride 1. Only strides 1 and 2 are supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (c,h,w) and w (o,c,kh,kw), got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {(kh, kw)}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({c_out},)")
    _validate_finite("conv2d", x.data, w.data, *(() if b is None else (b.data,)))

    ph, pw = kh // 2, kw // 2
    h, wd = x.shape[1], x.shape[2]
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def vjp_x(g):
        dcols = g.reshape(c_out, -1).T @ wmat
        dwin = dcols.reshape(ho, wo, c_in, kh, kw)
        dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                dxp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride] += \
                    dwin[:, :, :, di, dj].transpose(2, 0, 1)
        return dxp[:, ph:ph + h, pw:pw + wd]

    def vjp_w(g):
        return (g.reshape(c_out, -1) @ cols).reshape(w.shape)

    srcs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        srcs.append((b, lambda g: g.sum(axis=(1, 2))))
    return _make(out, srcs)


def _resize_axis(n_src, n_dst, dtype):
    """Corner-aligned source coordinates for one axis: (i0, i1, frac)."""
    if n_dst == 1 or n_src == 1:
        src = np.zeros(n_dst)
    else:
        src = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, (src - i0).astype(dtype)


def bilinear_resize(t, target):
    """Resize an (h, w) or (h, w, c) map with corner-aligned bilinear sampling."""
    t = as_tensor(t)
    if t.ndim not in (2, 3):
        raise ShapeError(f"bilinear_resize expects (h,w) or (h,w,c), got {t.shape}")
    ho, wo = int(target[0]), int(target[1])
    if ho < 1 or wo < 1:
        raise ValueError(f"bilinear_resize target extents must be >= 1, got {(ho, wo)}")
    _validate_finite("bilinear_resize", t.data)
    h, w = t.shape[0], t.shape[1]
    y0, y1, fy = _resize_axis(h, ho, t.data.dtype)
    x0, x1, fx = _resize_axis(w, wo, t.data.dtype)
    wy, wx = fy[:, None], fx[None, :]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    if t.ndim == 3:
        w00, w01, w10, w11 = (w[:, :, None] for w in (w00, w01, w10, w11))
    y0c, y1c, x0c, x1c = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    d = t.data
    out = (w00 * d[y0c, x0c] + w01 * d[y0c, x1c] +
           w10 * d[y1c, x0c] + w11 * d[y1c, x1c])

    def vjp(g):
        z = np.zeros_like(d)
        np.add.at(z, (y0c, x0c), w00 * g)
        np.add.at(z, (y0c, x1c), w01 * g)
        np.add.at(z, (y1c, x0c), w10 * g)
        np.add.at(z, (y1c, x1c), w11 * g)
        return z

    return _make(out, [(t, vjp)])


# composed helpers (not new primitives; derivative comes from the suite)

def absolute(a):
    return relu(a) + relu(neg(a))


def softplus(a):
    """log(1 + e^x) as a primitive: smooth, stable, derivative sigmoid(x)."""
    a = as_tensor(a)
    _validate_finite("softplus", a.data)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return _make(out, [(a, vjp)])


def minimum_t(a, b):
    """Elementwise min of two tensors via the relu composition."""
    return sub(a, relu(sub(a, b)))


def clamp(a, lo, hi):
    """Clamp to [lo, hi] (zero gradient outside the range)."""
    return neg(maximum(neg(maximum(a, lo)), -hi))


def silu(a):
    """x * sigmoid(x): a smooth relu substitute with similar dynamics."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(f, points, step=1e-4, fallback_steps=(), retry_above=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the given
    tensors. Error at each coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    Central differences carry an h-dependent error envelope (truncation
    grows with the step, float64 roundoff shrinks with it), and no single
    step suits every coordinate of a deep composition. When
    ``fallback_steps`` are given, a coordinate whose error at ``step``
    exceeds ``retry_above`` is re-measured at each fallback and keeps its
    best agreement: a genuine gradient bug disagrees at every step, while
    finite-difference noise is step-structured.
    """
    if step <= 0 or any(s <= 0 for s in fallback_steps):
        raise ValueError(f"finite_diff_check step must be > 0, got {step}")
    pts = [points] if isinstance(points, Tensor) else list(points)
    base = [np.asarray(p.data, dtype=np.float64) for p in pts]

    with checking():
        leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
        out = f(*leaves)
        backward(out)
        analytic = [np.zeros_like(b) if lf.grad is None else np.asarray(lf.grad, dtype=np.float64)
                    for b, lf in zip(base, leaves)]

        def central(i, j, h):
            vals = []
            for s in (h, -h):
                arrs = [x.copy() for x in base]
                arrs[i].reshape(-1)[j] += s
                try:
                    v = float(f(*[Tensor(x) for x in arrs]).data)
                except ValueError as e:
                    raise ValueError(
                        f"finite_diff_check: f non-finite at input {i} "
                        f"coordinate {j}: {e}") from e
                if not np.isfinite(v):
                    raise ValueError(
                        f"finite_diff_check: f non-finite at input {i} coordinate {j}")
                vals.append(v)
            return (vals[0] - vals[1]) / (2.0 * h)

        max_err = 0.0
        for i, b in enumerate(base):
            flat = b.reshape(-1)
            ana = analytic[i].reshape(-1)
            for j in range(flat.size):
                def rel(numeric):
                    return abs(ana[j] - numeric) / max(1e-8, abs(ana[j]) + abs(numeric))
                err = rel(central(i, j, step))
                if err > retry_above:
                    for h in fallback_steps:
                        err = min(err, rel(central(i, j, h)))
                        if err <= retry_above:
                            break
                max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# serialization: "EMTN" little-endian binary, float32 row-major
# ---------------------------------------------------------------------------

_MAGIC = b"EMTN"
_VERSION = 1


def save_tensor(path, t):
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        buf = fh.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"{path}: truncated tensor payload")
        extra = fh.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after tensor payload")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
