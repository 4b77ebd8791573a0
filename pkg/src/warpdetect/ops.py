"""Differentiable operations over :class:`~warpdetect.tensor.Tensor`.

Each op validates its contract, runs the forward through the selected
kernel backend (or plain numpy for pointwise work), and records a backward
closure. Constants may be passed as plain scalars/arrays; they receive no
gradient.
"""

import numpy as np

from . import backend
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor

# grid coordinates this close to an integer pixel index are snapped onto
# it, making lattice-aligned sampling (and hence identity warps) bit-exact
LATTICE_SNAP = 1e-8


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy, a.data.shape), _unbroadcast(dy, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy, a.data.shape), _unbroadcast(-dy, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy * b.data, a.data.shape),
        _unbroadcast(dy * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy / b.data, a.data.shape),
        _unbroadcast(-dy * a.data / (b.data * b.data), b.data.shape)))


def neg(a):
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda dy: (-dy,))


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return Tensor.from_op(a.data * s, (a,), lambda dy: (dy * s,))


def square(a):
    a = as_tensor(a)
    return Tensor.from_op(a.data * a.data, (a,), lambda dy: (2.0 * a.data * dy,))


def minimum(a, const):
    """Elementwise min with a constant; subgradient passes where a < const."""
    a = as_tensor(a)
    c = np.asarray(const, dtype=np.float64)
    out = np.minimum(a.data, c)
    return Tensor.from_op(out, (a,), lambda dy: (dy * (a.data < c),))


def maximum(a, const):
    a = as_tensor(a)
    c = np.asarray(const, dtype=np.float64)
    out = np.maximum(a.data, c)
    return Tensor.from_op(out, (a,), lambda dy: (dy * (a.data > c),))


def minimum_t(a, b):
    """Elementwise min of two tensors; ties route the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy * take_a, a.data.shape),
        _unbroadcast(dy * ~take_a, b.data.shape)))


def maximum_t(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor.from_op(out, (a, b), lambda dy: (
        _unbroadcast(dy * take_a, a.data.shape),
        _unbroadcast(dy * ~take_a, b.data.shape)))


# -- pointwise nonlinearities ----------------------------------------------

def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return Tensor.from_op(out, (a,), lambda dy: (dy * (a.data > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return Tensor.from_op(out, (a,), lambda dy: (dy * out * (1.0 - out),))


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda dy: (dy * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda dy: (dy * out,))


def log(a):
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda dy: (dy / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda dy: (dy * 0.5 / out,))


def arctan(a):
    a = as_tensor(a)
    return Tensor.from_op(np.arctan(a.data), (a,),
                          lambda dy: (dy / (1.0 + a.data * a.data),))


# -- shape plumbing ---------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    return Tensor.from_op(a.data.reshape(shape), (a,),
                          lambda dy: (dy.reshape(orig),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor.from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                          lambda dy: (dy.transpose(inv),))


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(dy):
        return tuple(np.ascontiguousarray(g)
                     for g in np.split(dy, splits, axis=axis))
    return Tensor.from_op(out, tuple(parts), bwd)


def index_axis0(a, i):
    """Select one slice along axis 0 (differentiable)."""
    a = as_tensor(a)
    i = int(i)

    def bwd(dy):
        g = np.zeros_like(a.data)
        g[i] = dy
        return (g,)
    return Tensor.from_op(a.data[i], (a,), bwd)


def take_flat(a, indices):
    """Gather a.flat[indices]; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data.reshape(-1)[idx]

    def bwd(dy):
        g = np.bincount(idx.ravel(), weights=dy.ravel(),
                        minlength=a.data.size)
        return (g.reshape(a.data.shape),)
    return Tensor.from_op(out, (a,), bwd)


# -- reductions -------------------------------------------------------------

def sum_all(a):
    a = as_tensor(a)
    shape = a.data.shape
    return Tensor.from_op(np.asarray(a.data.sum()), (a,),
                          lambda dy: (np.broadcast_to(dy, shape).copy(),))


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    shape = a.data.shape
    return Tensor.from_op(np.asarray(a.data.mean()), (a,),
                          lambda dy: (np.broadcast_to(dy / n, shape).copy(),))


def sum_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(dy):
        if not keepdims:
            dy = np.expand_dims(dy, axis)
        return (np.broadcast_to(dy, shape).copy(),)
    return Tensor.from_op(out, (a,), bwd)


def logsumexp(a, axis):
    """Numerically stable log-sum-exp along one axis (keeps the axis)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = ex / s
    return Tensor.from_op(out, (a,), lambda dy: (dy * soft,))


def softmax_expectation(logits, values):
    """Expectation of constant `values` under softmax(logits), last axis."""
    a = as_tensor(logits)
    vals = np.asarray(values, dtype=np.float64)
    m = a.data.max(axis=-1, keepdims=True)
    ex = np.exp(a.data - m)
    p = ex / ex.sum(axis=-1, keepdims=True)
    out = (p * vals).sum(axis=-1)

    def bwd(dy):
        return (p * (vals - out[..., None]) * dy[..., None],)
    return Tensor.from_op(out, (a,), bwd)


# -- dense / conv layers ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    return Tensor.from_op(out, (a, b), lambda dy: (dy @ b.data.T, a.data.T @ dy))


def apply_linear_map(M, x):
    """y[..., p, c] = sum_n M[p, n] * x[..., n, c] for a constant matrix M."""
    x = as_tensor(x)
    M = np.asarray(M, dtype=np.float64)
    n, c = x.data.shape[-2], x.data.shape[-1]
    lead = x.data.shape[:-2]
    x2 = x.data.reshape(-1, n, c).transpose(1, 0, 2).reshape(n, -1)
    out = (M @ x2).reshape(M.shape[0], -1, c).transpose(1, 0, 2)
    out = np.ascontiguousarray(out).reshape(*lead, M.shape[0], c)

    def bwd(dy):
        d2 = dy.reshape(-1, M.shape[0], c).transpose(1, 0, 2).reshape(
            M.shape[0], -1)
        g = (M.T @ d2).reshape(n, -1, c).transpose(1, 0, 2)
        return (np.ascontiguousarray(g).reshape(x.data.shape),)
    return Tensor.from_op(out, (x,), bwd)


def linear(x, w, b=None):
    """x (..., F) @ w (F, O) + b."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

        def bwd(dy):
            dy2 = dy.reshape(-1, dy.shape[-1])
            return (np.ascontiguousarray((dy2 @ w.data.T).reshape(x.data.shape)),
                    x2.T @ dy2, dy2.sum(axis=0))
        return Tensor.from_op(out.reshape(*lead, -1), parents, bwd)

    def bwd(dy):
        dy2 = dy.reshape(-1, dy.shape[-1])
        return (np.ascontiguousarray((dy2 @ w.data.T).reshape(x.data.shape)),
                x2.T @ dy2)
    return Tensor.from_op(out.reshape(*lead, -1), (x, w), bwd)


def _ensure_nchw(x):
    """Promote (C,H,W) to (1,C,H,W); returns (array, had_batch)."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise DimensionError(f"expected 3-D or 4-D feature map, got shape {x.shape}")


def conv2d(x, k, b=None, stride=1, padding=0):
    """2-D cross-correlation of (N,)C_in,H,W with (C_out,C_in,kH,kW).

    Odd kernel sides, stride >= 1, padding >= 0; the output extent
    (H + 2*pad - kH)/stride + 1 must be integral.
    """
    x, k = as_tensor(x), as_tensor(k)
    bt = as_tensor(b) if b is not None else None
    xd, batched = _ensure_nchw(x.data)
    CO, CI, KH, KW = k.data.shape
    if KH % 2 == 0 or KW % 2 == 0:
        raise ConfigurationError(f"kernel sides must be odd, got {KH}x{KW}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    if xd.shape[1] != CI:
        raise DimensionError(f"input channels {xd.shape[1]} != kernel {CI}")
    if bt is not None and bt.data.shape != (CO,):
        raise DimensionError(f"bias shape {bt.data.shape} != ({CO},)")
    H, W = xd.shape[2], xd.shape[3]
    if (H + 2 * padding - KH) % stride or (W + 2 * padding - KW) % stride:
        raise ConfigurationError(
            f"non-integer output size for {H}x{W}, kernel {KH}x{KW}, "
            f"stride {stride}, padding {padding}")
    if H + 2 * padding < KH or W + 2 * padding < KW:
        raise ConfigurationError("kernel larger than padded input")
    ws = {}
    y = backend.conv2d_forward(xd, k.data, None if bt is None else bt.data,
                               stride, padding, workspace=ws)
    parents = (x, k) if bt is None else (x, k, bt)

    def bwd(dy):
        dy4 = dy if batched else dy[None]
        dx, dk, db = backend.conv2d_backward(xd, k.data,
                                             np.ascontiguousarray(dy4),
                                             stride, padding, workspace=ws,
                                             need_dx=x.requires_grad)
        if dx is not None and not batched:
            dx = dx[0]
        return (dx, dk) if bt is None else (dx, dk, db)
    return Tensor.from_op(y if batched else y[0], parents, bwd)


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial sides must be even."""
    x = as_tensor(x)
    xd, batched = _ensure_nchw(x.data)
    if xd.shape[2] % 2 or xd.shape[3] % 2:
        raise DimensionError(f"2x2 pooling needs even sides, got {xd.shape}")
    y = backend.avgpool2_forward(xd)

    def bwd(dy):
        dx = backend.avgpool2_backward(dy if batched else dy[None])
        return (dx if batched else dx[0],)
    return Tensor.from_op(y if batched else y[0], (x,), bwd)


def global_pool(x, mode="average"):
    """Per-channel global pooling of (N,)C,H,W down to (N,)C.

    Max mode routes the gradient to the first maximal element in row-major
    order.
    """
    x = as_tensor(x)
    if mode not in ("average", "max"):
        raise ConfigurationError(f"unknown pooling mode {mode!r}")
    xd, batched = _ensure_nchw(x.data)
    N, C, H, W = xd.shape
    if H < 1 or W < 1:
        raise DimensionError("empty spatial extent")
    flat = xd.reshape(N, C, H * W)
    if mode == "average":
        y = flat.mean(axis=2)

        def bwd(dy):
            dy2 = dy if batched else dy[None]
            dx = np.broadcast_to((dy2 / (H * W))[:, :, None, None],
                                 xd.shape).copy()
            return (dx if batched else dx[0],)
    else:
        arg = flat.argmax(axis=2)
        y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

        def bwd(dy):
            dy2 = dy if batched else dy[None]
            dx = np.zeros_like(flat)
            np.put_along_axis(dx, arg[:, :, None], dy2[:, :, None], axis=2)
            dx = dx.reshape(xd.shape)
            return (dx if batched else dx[0],)
    return Tensor.from_op(y if batched else y[0], (x,), bwd)


def channel_pool(x, mode):
    """Pool over the channel axis of (N,)C,H,W, keeping a 1-channel map."""
    x = as_tensor(x)
    xd, batched = _ensure_nchw(x.data)
    if mode == "average":
        y = xd.mean(axis=1, keepdims=True)
        C = xd.shape[1]

        def bwd(dy):
            dy4 = dy if batched else dy[None]
            dx = np.broadcast_to(dy4 / C, xd.shape).copy()
            return (dx if batched else dx[0],)
    elif mode == "max":
        arg = xd.argmax(axis=1, keepdims=True)
        y = np.take_along_axis(xd, arg, axis=1)

        def bwd(dy):
            dy4 = dy if batched else dy[None]
            dx = np.zeros_like(xd)
            np.put_along_axis(dx, arg, dy4, axis=1)
            return (dx if batched else dx[0],)
    else:
        raise ConfigurationError(f"unknown pooling mode {mode!r}")
    return Tensor.from_op(y if batched else y[0], (x,), bwd)


# -- sampling ---------------------------------------------------------------

def _unnormalize(g, H, W):
    """Map align-corners [-1,1] grid coords to pixel units with snapping."""
    px = (g[..., 0] + 1.0) * 0.5 * (W - 1)
    py = (g[..., 1] + 1.0) * 0.5 * (H - 1)
    rx, ry = np.rint(px), np.rint(py)
    px = np.where(np.abs(px - rx) <= LATTICE_SNAP, rx, px)
    py = np.where(np.abs(py - ry) <= LATTICE_SNAP, ry, py)
    return np.ascontiguousarray(np.stack([px, py], axis=-1))


def grid_sample(x, grid, padding="zeros"):
    """Bilinear sampling of (N,)C,H,W at (N,)H',W',2 normalized coords.

    Align-corners convention; gradients flow to both the image and the
    grid. Padding is "zeros" (out-of-frame reads as 0) or "clamp".
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if padding not in ("zeros", "clamp"):
        raise ConfigurationError(f"unknown padding policy {padding!r}")
    mode = 0 if padding == "zeros" else 1
    xd, batched = _ensure_nchw(x.data)
    gd = grid.data
    if gd.ndim == 3:
        gd4 = np.broadcast_to(gd[None], (xd.shape[0],) + gd.shape)
        gd4 = np.ascontiguousarray(gd4)
        grid_batched = False
    elif gd.ndim == 4:
        gd4 = gd
        grid_batched = True
    else:
        raise DimensionError(f"grid must be (..,H,W,2), got {gd.shape}")
    if gd4.shape[-1] != 2 or gd4.shape[0] != xd.shape[0]:
        raise DimensionError(f"grid shape {gd.shape} incompatible with input")
    if not np.all(np.isfinite(gd4)):
        raise ValueError("non-finite grid coordinates")
    H, W = xd.shape[2], xd.shape[3]
    pix = _unnormalize(gd4, H, W)
    y = backend.bilinear_forward(xd, pix, mode)

    def bwd(dy):
        dy4 = np.ascontiguousarray(dy if batched else dy[None])
        dx, dpix = backend.bilinear_backward(xd, pix, dy4, mode)
        dg = np.empty_like(dpix)
        dg[..., 0] = dpix[..., 0] * 0.5 * (W - 1)
        dg[..., 1] = dpix[..., 1] * 0.5 * (H - 1)
        if not grid_batched:
            dg = dg.sum(axis=0)
        return (dx if batched else dx[0], dg)
    return Tensor.from_op(y if batched else y[0], (x, grid), bwd)


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on logits against constant targets."""
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    sig = _sigmoid_np(zd)
    return Tensor.from_op(out, (z,), lambda dy: (dy * (sig - t),))
