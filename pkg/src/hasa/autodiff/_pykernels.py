"""Numpy reference kernels. Same signatures as the compiled ``_ckernels`` module.

All inputs are already padded; ``Ho``/``Wo`` are the output spatial sizes.
"""
import numpy as np


def _window(ky, kx, stride, dilation, Ho, Wo):
    y0, x0 = ky * dilation, kx * dilation
    return (
        slice(y0, y0 + stride * (Ho - 1) + 1, stride),
        slice(x0, x0 + stride * (Wo - 1) + 1, stride),
    )


def im2col(xp, kh, kw, stride, dilation, Ho, Wo):
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _window(ky, kx, stride, dilation, Ho, Wo)
            cols[:, :, ky, kx] = xp[:, :, sy, sx]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def col2im(cols, xp_shape, kh, kw, stride, dilation, Ho, Wo):
    N, C = xp_shape[:2]
    cols = cols.reshape(N, C, kh, kw, Ho, Wo)
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _window(ky, kx, stride, dilation, Ho, Wo)
            gxp[:, :, sy, sx] += cols[:, :, ky, kx]
    return gxp


def depthwise_forward(xp, w, stride, dilation, Ho, Wo):
    N, C = xp.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((N, C, Ho, Wo), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _window(ky, kx, stride, dilation, Ho, Wo)
            out += xp[:, :, sy, sx] * w[:, ky, kx][None, :, None, None]
    return out


def depthwise_backward(xp, w, g, stride, dilation):
    kh, kw = w.shape[1:]
    Ho, Wo = g.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _window(ky, kx, stride, dilation, Ho, Wo)
            gxp[:, :, sy, sx] += g * w[:, ky, kx][None, :, None, None]
            gw[:, ky, kx] = np.einsum("nchw,nchw->c", g, xp[:, :, sy, sx])
    return gxp, gw
