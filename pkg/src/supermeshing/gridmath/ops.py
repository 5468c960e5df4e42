"""Differentiable kernels on N x C x H x W tensors.

Convolution uses an im2col layout of shape (C*k*k, N*Ho*Wo) so that the
forward pass and both weight/input gradients are single GEMM calls.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ConfigurationError
from .tensor import Tensor

UPSAMPLE_SCALES = (2, 4, 8)


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


def _tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{what} expects an N x C x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)

    def backward(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)

        def backward_scalar(g):
            _push(a, g * c)

        return Tensor._make(a.data * c, (a,), backward_scalar)
    a = _tensor(a, b if isinstance(b, Tensor) else None)
    b = _tensor(b, a)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _push(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        _push(x, g * np.sign(x.data))

    return Tensor._make(np.abs(x.data), (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        _push(x, g * (2.0 * x.data))

    return Tensor._make(x.data * x.data, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    slope = float(slope)
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * slope)

    def backward(g):
        _push(x, np.where(positive, g, g * slope))

    return Tensor._make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    # keep the output strictly inside (0, 1) even where float32 saturates
    tiny = np.finfo(y.dtype).tiny
    np.clip(y, tiny, np.nextafter(y.dtype.type(1), y.dtype.type(0)), out=y)

    def backward(g):
        _push(x, g * y * (1.0 - y))

    return Tensor._make(y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _push(x, np.broadcast_to(g, x.shape))

    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _push(x, np.broadcast_to(g / n, x.shape))

    return Tensor._make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                _push(t, g[tuple(index)])

    return Tensor._make(out, tensors, backward)


def log_softmax_spatial(x: Tensor) -> Tensor:
    """Log-softmax over the H x W positions of every (sample, channel)."""
    _require_rank4(x, "log_softmax_spatial")
    peak = x.data.max(axis=(2, 3), keepdims=True)
    shifted = x.data - peak
    lse = np.log(np.exp(shifted).sum(axis=(2, 3), keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def backward(g):
        _push(x, g - prob * g.sum(axis=(2, 3), keepdims=True))

    return Tensor._make(out, (x,), backward)


# ---------------------------------------------------------------------------
# pooling statistics
# ---------------------------------------------------------------------------

def pool_channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel global average and maximum, each N x C x 1 x 1.

    The max gradient is routed to the first maximal element in row-major order.
    """
    _require_rank4(x, "pool_channel_stats")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ConfigurationError(f"pool_channel_stats needs a non-empty spatial extent, got {h}x{w}")
    avg_data = x.data.mean(axis=(2, 3), keepdims=True)
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    max_data = np.take_along_axis(flat, arg[..., None], axis=2).reshape(n, c, 1, 1)
    area = h * w

    def backward_avg(g):
        _push(x, np.broadcast_to(g / area, x.shape))

    def backward_max(g):
        dx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(dx, arg[..., None], g.reshape(n, c, 1), axis=2)
        _push(x, dx.reshape(x.shape))

    return (Tensor._make(avg_data, (x,), backward_avg),
            Tensor._make(max_data, (x,), backward_max))


def pool_spatial_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position average and maximum across channels, each N x 1 x H x W."""
    _require_rank4(x, "pool_spatial_stats")
    n, c, h, w = x.shape
    if c == 0:
        raise ConfigurationError("pool_spatial_stats needs at least one channel")
    avg_data = x.data.mean(axis=1, keepdims=True)
    arg = x.data.argmax(axis=1)[:, None]
    max_data = np.take_along_axis(x.data, arg, axis=1)

    def backward_avg(g):
        _push(x, np.broadcast_to(g / c, x.shape))

    def backward_max(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(dx, arg, g, axis=1)
        _push(x, dx)

    return (Tensor._make(avg_data, (x,), backward_avg),
            Tensor._make(max_data, (x,), backward_max))


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------

def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in), float64."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank4(x, "resize_bilinear")
    _, _, h, w = x.shape
    ah = interpolation_matrix(h, out_h).astype(x.dtype)
    aw_t = interpolation_matrix(w, out_w).T.astype(x.dtype).copy()
    out = np.matmul(np.matmul(ah, x.data), aw_t)

    def backward(g):
        _push(x, np.matmul(ah.T, np.matmul(g, aw_t.T)))

    return Tensor._make(out, (x,), backward)


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling by 2, 4 or 8 with corner samples kept in place."""
    if scale not in UPSAMPLE_SCALES:
        raise ConfigurationError(f"upsample scale must be one of {UPSAMPLE_SCALES}, got {scale}")
    _require_rank4(x, "upsample_bilinear")
    return resize_bilinear(x, x.shape[2] * scale, x.shape[3] * scale)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + hi:stride, j:j + wi:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols: np.ndarray, shape_p: tuple[int, ...], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape_p
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero "same" padding (k // 2 on each side).

    Output spatial size is ceil(H / stride) x ceil(W / stride).
    """
    _require_rank4(x, "conv2d")
    if weight.ndim != 4:
        raise ConfigurationError(f"conv2d weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    n, c, h, w = x.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if c != c_in:
        raise ConfigurationError(f"conv2d input has {c} channels but weight expects C_in={c_in}")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")

    pad = k // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    if k == 1 and stride == 1:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    res = (wmat @ cols).reshape(c_out, n, ho, wo)
    out = np.empty((n, c_out, ho, wo), dtype=x.dtype)
    if bias is None:
        np.copyto(out, res.transpose(1, 0, 2, 3))
    else:
        np.add(res.transpose(1, 0, 2, 3), bias.data[:, None, None], out=out)
    parents = (x, weight) if bias is None else (x, weight, bias)
    shape_p = xp.shape

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * ho * wo)
        if bias is not None and bias.requires_grad:
            _push(bias, gt.sum(axis=1))
        if weight.requires_grad:
            _push(weight, (gt @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = wmat.T @ gt
            if k == 1 and stride == 1:
                dx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dxp = _col2im(dcols, shape_p, k, stride, ho, wo)
                dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            _push(x, np.ascontiguousarray(dx))

    return Tensor._make(out, parents, backward)
