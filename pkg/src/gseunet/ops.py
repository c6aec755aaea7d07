"""Differentiable operations used by the segmentation network.

All functions take and return :class:`~gseunet.tensor.Tensor` objects, never
modify their inputs, and keep the input dtype. Convolutions are
cross-correlations with zero padding.
"""
from __future__ import annotations

import contextlib
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_result

__all__ = [
    "conv2d",
    "conv1d_channels",
    "max_pool2d",
    "transposed_conv2d",
    "concat_channels",
    "slice_channels",
    "split_channels",
    "channel_shift",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "mul_channelwise",
    "softmax_channels",
    "log_softmax_channels",
]


_branch_log: Optional[list] = None


@contextlib.contextmanager
def record_branches():
    """Collect the relu masks and max-pool argmaxes taken inside the block.

    Finite-difference checks use this to detect steps that cross a kink.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _require_rank(op: str, t: Tensor, rank: int, what: str = "input") -> None:
    if t.ndim != rank:
        raise ShapeError(op, f"{what} must have rank {rank}, got shape {t.shape}")


# conv2d ----------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [C, kh, kw, N, ho, wo] (receptive field row-major)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(dcols: np.ndarray, padded_shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns [N, C, Hp, Wp]."""
    c, kh, kw, n, ho, wo = dcols.shape
    _, _, hp, wp = padded_shape
    dxt = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxt.transpose(1, 0, 2, 3)


def _conv2d_backward(g: np.ndarray, cache: dict):
    """Gradients of conv2d w.r.t. (input, weight, bias); ``dx`` is None when not needed."""
    w, cols, groups = cache["weight"], cache["cols"], cache["groups"]
    stride, padding, x_shape = cache["stride"], cache["padding"], cache["x_shape"]
    cout, cin_g, kh, kw = w.shape
    n, _, ho, wo = g.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(groups, cout // groups, n * ho * wo)
    w2 = w.reshape(groups, cout // groups, cin_g * kh * kw)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).reshape(w.shape)
    db = g.sum(axis=(0, 2, 3)) if cache["has_bias"] else None
    if not cache["need_dx"]:
        return None, dw, db
    dcols = np.matmul(w2.transpose(0, 2, 1), g2)
    dcols = dcols.reshape(cin_g * groups, kh, kw, n, ho, wo)
    h, wd = x_shape[2], x_shape[3]
    dxp = _col2im(dcols, (n, x_shape[1], h + 2 * padding, wd + 2 * padding), stride)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dx), dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    Args:
        x: ``[N, C_in, H, W]``.
        weight: ``[C_out, C_in // groups, kH, kW]``.
        bias: optional ``[C_out]``.

    Output channel block ``g`` only reads input channel block ``g``.
    """
    op = "conv2d"
    _require_rank(op, x, 4)
    _require_rank(op, weight, 4, "weight")
    if groups < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"{op}: need groups >= 1, stride >= 1, padding >= 0 "
                          f"(got {groups}, {stride}, {padding})")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups:
        raise ConfigError(f"{op}: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ConfigError(f"{op}: output channels {cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(op, f"weight expects {cin_g * groups} input channels, input has {cin}", dim=1)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(op, f"bias must have shape ({cout},), got {bias.shape}", dim=0)
    ho, wo = [(s + 2 * padding - k) // stride + 1 for s, k in ((h, kh), (wd, kw))]
    for dim, s, k, o in ((2, h, kh, ho), (3, wd, kw, wo)):
        span = s + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(op, f"size {s} with kernel {k}, padding {padding}, stride {stride} "
                                 f"does not tile exactly", dim=dim)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(groups, cin_g * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(w2, cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    cache = dict(weight=weight.data, cols=cols, groups=groups, stride=stride,
                 padding=padding, x_shape=x.shape, has_bias=bias is not None,
                 need_dx=x.requires_grad)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw, db = _conv2d_backward(g, cache)
        return (dx, dw) if bias is None else (dx, dw, db)

    return make_result(op, out, inputs, backward)


# conv1d across channels (ECA) -------------------------------------------------


def conv1d_channels(v: Tensor, weight: Tensor) -> Tensor:
    """1-D zero-padded cross-correlation along the channel axis.

    ``v`` is ``[C]`` or ``[N, C]`` (each row filtered independently);
    ``weight`` is ``[k]`` with ``k`` odd and ``k <= C``.
    ``out[c] = sum_j v[c + j - k // 2] * weight[j]``.
    """
    op = "conv1d_channels"
    if weight.ndim != 1:
        raise ShapeError(op, f"weight must be 1-D, got shape {weight.shape}")
    if v.ndim not in (1, 2):
        raise ShapeError(op, f"input must be [C] or [N, C], got shape {v.shape}")
    k = weight.shape[0]
    c = v.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"{op}: kernel size must be odd, got {k}")
    if k > c:
        raise ConfigError(f"{op}: kernel size {k} exceeds channel count {c}")
    half = k // 2
    vd = v.data.reshape(-1, c)
    vp = np.pad(vd, ((0, 0), (half, half)))
    wd = weight.data
    out = np.zeros_like(vd)
    for j in range(k):
        out += vp[:, j:j + c] * wd[j]

    def backward(g):
        g2 = g.reshape(-1, c)
        dvp = np.zeros_like(vp)
        dw = np.empty_like(wd)
        for j in range(k):
            dvp[:, j:j + c] += g2 * wd[j]
            dw[j] = (g2 * vp[:, j:j + c]).sum()
        return dvp[:, half:half + c].reshape(v.shape), dw

    return make_result(op, out.reshape(v.shape), (v, weight), backward)


# pooling / upsampling ---------------------------------------------------------


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    The gradient goes to the first maximum of each window in row-major order.
    """
    op = "max_pool2d"
    _require_rank(op, x, 4)
    if window != 2:
        raise ConfigError(f"{op}: only window=2 is supported, got {window}")
    n, c, h, w = x.shape
    for dim, s in ((2, h), (3, w)):
        if s % 2:
            raise ShapeError(op, f"spatial size {s} is odd", dim=dim)
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    if _branch_log is not None:
        _branch_log.append(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return make_result(op, np.ascontiguousarray(out), (x,), backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """2x2, stride-2 transposed convolution: ``[N, C_in, H, W] -> [N, C_out, 2H, 2W]``.

    ``weight`` is ``[C_in, C_out, 2, 2]``. Without bias this is the exact
    adjoint of ``conv2d(., weight, stride=2)``.
    """
    op = "transposed_conv2d"
    _require_rank(op, x, 4)
    _require_rank(op, weight, 4, "weight")
    if stride != 2 or weight.shape[2:] != (2, 2):
        raise ConfigError(f"{op}: only a 2x2 kernel with stride 2 is supported")
    n, cin, h, w = x.shape
    if weight.shape[0] != cin:
        raise ShapeError(op, f"weight expects {weight.shape[0]} input channels, input has {cin}", dim=1)
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(op, f"bias must have shape ({cout},), got {bias.shape}", dim=0)
    xf = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    wf = weight.data.reshape(cin, cout * 4)
    y = (xf @ wf).reshape(n, h, w, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gf = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, cout * 4)
        dx = (gf @ wf.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        dw = (xf.T @ gf).reshape(weight.shape)
        grads = (np.ascontiguousarray(dx), dw)
        return grads if bias is None else grads + (g.sum(axis=(0, 2, 3)),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(op, y, inputs, backward)


# channel plumbing -------------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    op = "concat_channels"
    _require_rank(op, a, 4)
    _require_rank(op, b, 4)
    for dim in (0, 2, 3):
        if a.shape[dim] != b.shape[dim]:
            raise ShapeError(op, f"shapes {a.shape} and {b.shape} disagree", dim=dim)
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(op, out, (a, b), lambda g: (np.ascontiguousarray(g[:, :c1]), np.ascontiguousarray(g[:, c1:])))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    op = "slice_channels"
    _require_rank(op, x, 4)
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(op, f"channel range [{start}, {stop}) outside [0, {c}]", dim=1)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return make_result(op, x.data[:, start:stop].copy(), (x,), backward)


def split_channels(x: Tensor, c1: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`: channels ``[0, c1)`` and ``[c1, C)``."""
    return slice_channels(x, 0, c1), slice_channels(x, c1, x.shape[1])


def channel_shift(x: Tensor, s: int) -> Tensor:
    """Cyclic rotation of the channel axis: ``out[:, c] = x[:, (c - s) mod C]``."""
    op = "channel_shift"
    _require_rank(op, x, 4)
    c = x.shape[1]
    s = s % c if c else 0
    if s == 0:
        return make_result(op, x.data.copy(), (x,), lambda g: (g,))
    return make_result(op, np.roll(x.data, s, axis=1), (x,), lambda g: (np.roll(g, -s, axis=1),))


# elementwise / reductions -----------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(mask)
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    # float rounding would otherwise saturate to exactly 0 or 1
    info = np.finfo(a.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; outputs are kept strictly inside (0, 1)."""
    s = _sigmoid(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N, C, H, W] -> [N, C]`` spatial mean."""
    op = "global_avg_pool"
    _require_rank(op, x, 4)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result(op, out, (x,), backward)


def mul_channelwise(x: Tensor, w: Tensor) -> Tensor:
    """Scale each ``[H, W]`` plane of ``x`` (``[N, C, H, W]``) by ``w[n, c]``."""
    op = "mul_channelwise"
    _require_rank(op, x, 4)
    _require_rank(op, w, 2, "weights")
    for dim in (0, 1):
        if x.shape[dim] != w.shape[dim]:
            raise ShapeError(op, f"weights {w.shape} do not match input {x.shape}", dim=dim)
    xd, wd = x.data, w.data[:, :, None, None]
    return make_result(op, xd * wd, (x, w), lambda g: (g * wd, (g * xd).sum(axis=(2, 3))))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of ``[N, K, H, W]``."""
    op = "softmax_channels"
    _require_rank(op, x, 4)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(op, p, (x,), backward)


def log_softmax_channels(x: Tensor) -> Tensor:
    op = "log_softmax_channels"
    _require_rank(op, x, 4)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return make_result(op, out, (x,), backward)
