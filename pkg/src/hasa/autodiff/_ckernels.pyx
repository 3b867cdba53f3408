# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels. Mirrors ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double

cnp.import_array()


def _dtype_of(arr):
    return np.float32 if arr.dtype == np.float32 else np.float64


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation, int Ho, int Wo):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    out_arr = np.empty((N, C * kh * kw, Ho * Wo), dtype=_dtype_of(np.asarray(xp)))
    cdef real[:, :, ::1] cols = out_arr
    cdef Py_ssize_t n, c, ky, kx, oy, ox, row, iy
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        for oy in range(Ho):
                            iy = oy * stride + ky * dilation
                            for ox in range(Wo):
                                cols[n, row, oy * Wo + ox] = xp[n, c, iy, ox * stride + kx * dilation]
    return out_arr


def col2im(real[:, :, ::1] cols, tuple xp_shape, int kh, int kw, int stride, int dilation, int Ho, int Wo):
    cdef Py_ssize_t N = xp_shape[0], C = xp_shape[1]
    out_arr = np.zeros(xp_shape, dtype=_dtype_of(np.asarray(cols)))
    cdef real[:, :, :, ::1] gxp = out_arr
    cdef Py_ssize_t n, c, ky, kx, oy, ox, row, iy
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        for oy in range(Ho):
                            iy = oy * stride + ky * dilation
                            for ox in range(Wo):
                                gxp[n, c, iy, ox * stride + kx * dilation] += cols[n, row, oy * Wo + ox]
    return out_arr


def depthwise_forward(real[:, :, :, ::1] xp, real[:, :, ::1] w, int stride, int dilation, int Ho, int Wo):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    out_arr = np.zeros((N, C, Ho, Wo), dtype=_dtype_of(np.asarray(xp)))
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy
    cdef real wv
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[c, ky, kx]
                        for oy in range(Ho):
                            iy = oy * stride + ky * dilation
                            for ox in range(Wo):
                                out[n, c, oy, ox] += wv * xp[n, c, iy, ox * stride + kx * dilation]
    return out_arr


def depthwise_backward(real[:, :, :, ::1] xp, real[:, :, ::1] w, real[:, :, :, ::1] g, int stride, int dilation):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    dtype = _dtype_of(np.asarray(xp))
    gxp_arr = np.zeros((N, C, xp.shape[2], xp.shape[3]), dtype=dtype)
    gw_arr = np.zeros((C, kh, kw), dtype=dtype)
    cdef real[:, :, :, ::1] gxp = gxp_arr
    cdef real[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy, ix
    cdef real wv, acc, gv
    with nogil:
        for c in range(C):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[c, ky, kx]
                    acc = 0
                    for n in range(N):
                        for oy in range(Ho):
                            iy = oy * stride + ky * dilation
                            for ox in range(Wo):
                                ix = ox * stride + kx * dilation
                                gv = g[n, c, oy, ox]
                                gxp[n, c, iy, ix] += gv * wv
                                acc = acc + gv * xp[n, c, iy, ix]
                    gw[c, ky, kx] = acc
    return gxp_arr, gw_arr
