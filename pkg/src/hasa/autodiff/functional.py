"""Differentiable primitives.

Each function computes its forward result with numpy and returns a tensor
whose node knows how to map the output gradient back onto the inputs.
Broadcasting is deliberately absent except for bias/channel-scale forms.
"""
from __future__ import annotations

import functools
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from . import kernels
from .tensor import Tensor, default_dtype, make

NORM_EPS = 1e-5


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, *xs: Tensor) -> None:
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise DimensionError(f"{op}: shape mismatch {s} vs {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(*xs: Tensor) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    _same_shape("add", *xs)
    out = xs[0].data + xs[1].data
    for x in xs[2:]:
        out = out + x.data
    return make(out, xs, lambda g: (g,) * len(xs), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return make(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (axis 1)."""
    if b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias of shape {b.shape} does not fit {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return make(x.data + b.data.reshape(shape), (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``sum_i w[i] * xs[i]`` for a 1-d weight tensor."""
    if w.ndim != 1 or w.shape[0] != len(xs):
        raise DimensionError(f"need {len(xs)} weights, got shape {w.shape}")
    _same_shape("weighted_sum", *xs)
    wd = w.data
    out = xs[0].data * wd[0]
    for i in range(1, len(xs)):
        out = out + xs[i].data * wd[i]
    datas = [x.data for x in xs]

    def bw(g):
        gw = np.array([np.vdot(g, d) for d in datas], dtype=g.dtype)
        return tuple(g * wd[i] for i in range(len(datas))) + (gw,)

    return make(out, tuple(xs) + (w,), bw, "weighted_sum")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Rescale channels: x (N,C,H,W) times s (N,C)."""
    if s.shape != x.shape[:2]:
        raise DimensionError(f"scale of shape {s.shape} does not fit {x.shape}")
    xd, sd = x.data, s.data[:, :, None, None]
    return make(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=(2, 3))), "channel_scale")


# ---------------------------------------------------------------- structural


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for i in range(len(xs)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return make(out, tuple(xs), bw, "concat")


def getitem(x: Tensor, index: tuple) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[index]
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[index] = g
        return (gx,)

    return make(np.ascontiguousarray(out), (x,), bw, "getitem")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def total(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    return make(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape, dtype = x.shape, x.data.dtype
    return make(
        np.asarray(x.data.mean(), dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean"
    )


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_channel":
        return softmax(x, axis=1)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(a: np.ndarray, p: int) -> np.ndarray:
    return a if p == 0 else a[:, :, p:-p, p:-p]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ConfigError("conv2d: stride, dilation, groups must be positive and padding non-negative")
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}, groups={groups}")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise ConfigError(f"conv2d: empty output for input {H}x{W}, kernel {kh}x{kw}, dilation {dilation}")

    if groups == 1:
        out = _conv_dense(x, weight, stride, padding, dilation, Ho, Wo)
    elif groups == C and O == C:
        out = _conv_depthwise(x, weight, stride, padding, dilation, Ho, Wo)
    else:
        cin, cout = C // groups, O // groups
        parts = [
            _conv_dense(
                getitem(x, (slice(None), slice(i * cin, (i + 1) * cin))),
                getitem(weight, (slice(i * cout, (i + 1) * cout),)),
                stride, padding, dilation, Ho, Wo,
            )
            for i in range(groups)
        ]
        out = concat(parts, axis=1)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def _conv_dense(x, weight, stride, padding, dilation, Ho, Wo):
    N, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    w2 = weight.data.reshape(O, -1)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(N, C, Ho * Wo)

        def to_input(gcols):
            gcols = gcols.reshape(N, C, Ho, Wo)
            if stride == 1:
                return gcols
            gx = np.zeros((N, C, H, W), dtype=gcols.dtype)
            gx[:, :, ::stride, ::stride] = gcols
            return gx
    else:
        xp = _pad(x.data, padding)
        cols = kernels.im2col(xp, kh, kw, stride, dilation, Ho, Wo)

        def to_input(gcols):
            return _unpad(kernels.col2im(np.ascontiguousarray(gcols), xp.shape, kh, kw, stride, dilation, Ho, Wo), padding)

    out = np.matmul(w2, cols).reshape(N, O, Ho, Wo)

    def bw(g):
        g3 = g.reshape(N, O, Ho * Wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = to_input(np.matmul(w2.T, g3)) if x.requires_grad else None
        return gx, gw

    return make(out, (x, weight), bw, "conv2d")


def _conv_depthwise(x, weight, stride, padding, dilation, Ho, Wo):
    C = x.shape[1]
    kh, kw = weight.shape[2:]
    xp = _pad(x.data, padding)
    w3 = np.ascontiguousarray(weight.data.reshape(C, kh, kw))
    out = kernels.depthwise_forward(xp, w3, stride, dilation, Ho, Wo)

    def bw(g):
        gxp, gw = kernels.depthwise_backward(xp, w3, np.ascontiguousarray(g), stride, dilation)
        return _unpad(gxp, padding), gw.reshape(weight.shape)

    return make(out, (x, weight), bw, "conv2d_depthwise")


# ---------------------------------------------------------------- pooling


def pool2d(x: Tensor, kind: str, kernel: int = 2, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """max / avg pooling (avg excludes padding from the divisor) or global_avg."""
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects a 4-d input, got {x.shape}")
    N, C, H, W = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        hw, dtype = H * W, x.data.dtype
        return make(out, (x,), lambda g: (np.broadcast_to(g / hw, (N, C, H, W)).astype(dtype),), "global_avg")
    if kind not in ("max", "avg"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    stride = stride or kernel
    if kernel < 1 or stride < 1:
        raise ConfigError("pool2d: kernel and stride must be positive")
    if kernel > H + 2 * padding or kernel > W + 2 * padding:
        raise ConfigError(f"pool2d: kernel {kernel} larger than padded input {H}x{W}+{padding}")
    Ho = conv_output_size(H, kernel, stride, padding, 1)
    Wo = conv_output_size(W, kernel, stride, padding, 1)
    windows = [
        (slice(ky, ky + stride * (Ho - 1) + 1, stride), slice(kx, kx + stride * (Wo - 1) + 1, stride))
        for ky in range(kernel)
        for kx in range(kernel)
    ]
    if kind == "max":
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf) if padding else x.data
        stack = np.stack([xp[:, :, sy, sx] for sy, sx in windows], axis=0)
        arg = stack.argmax(axis=0)
        out = np.take_along_axis(stack, arg[None], axis=0)[0]

        def bw(g):
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, (sy, sx) in enumerate(windows):
                gxp[:, :, sy, sx] += g * (arg == i)
            return (_unpad(gxp, padding),)

        return make(out, (x,), bw, "max_pool")

    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, H, W), dtype=x.data.dtype), padding)
    acc = np.zeros((N, C, Ho, Wo), dtype=x.data.dtype)
    cnt = np.zeros((1, 1, Ho, Wo), dtype=x.data.dtype)
    for sy, sx in windows:
        acc += xp[:, :, sy, sx]
        cnt += ones[:, :, sy, sx]
    out = acc / cnt

    def bw(g):
        gs = g / cnt
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for sy, sx in windows:
            gxp[:, :, sy, sx] += gs
        return (_unpad(gxp, padding),)

    return make(out, (x,), bw, "avg_pool")


# ---------------------------------------------------------------- resampling


@functools.lru_cache(maxsize=64)
def _interp_matrix(size: int, factor: int, dtype) -> np.ndarray:
    """Half-pixel-centre linear interpolation matrix (out_size x size)."""
    out = size * factor
    m = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = min(max((o + 0.5) / factor - 0.5, 0.0), size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling, half-pixel centres (align_corners=False), edge-clamped."""
    if factor not in (2, 4):
        raise ConfigError(f"upsample factor must be 2 or 4, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects a 4-d input, got {x.shape}")
    H, W = x.shape[2:]
    uh = _interp_matrix(H, factor, x.data.dtype.type)
    uw = _interp_matrix(W, factor, x.data.dtype.type)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),), "bilinear_upsample")


# ---------------------------------------------------------------- dense / norm


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias``; 4-d inputs are flattened first."""
    if x.ndim != 2:
        x = flatten(x)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"dense: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        return make(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "dense")
    return make(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "dense")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 1) -> Tensor:
    """Per-sample normalisation over channel groups (and space), then a per-channel affine.

    ``groups=1`` normalises over all of C, H, W; ``groups=C`` is instance norm.
    """
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects a 4-d input, got {x.shape}")
    N, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise DimensionError(f"group_norm: {C} channels not divisible into {groups} groups")
    xd = x.data.reshape(N, groups, -1)
    m = xd.shape[2]
    mu = xd.mean(axis=2, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + NORM_EPS)
    xhat = xc * inv
    xhat4 = xhat.reshape(N, C, H, W)
    gd = gamma.data[None, :, None, None]
    out = xhat4 * gd + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat4).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(N, groups, -1)
            gx = inv / m * (
                m * dxhat
                - dxhat.sum(axis=2, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=2, keepdims=True)
            )
            gx = gx.reshape(N, C, H, W)
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), bw, "group_norm")


def zeros(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()))
