# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: direct convolution loops and non-local means.

Signatures mirror py_backend exactly; both dtypes (float32/float64) are
supported through a fused type. Arrays must be C-contiguous. The stride-1
convolution paths run on raw row pointers so the compiler can vectorize the
inner loops.
"""

import numpy as np

cimport cython
from libc.math cimport exp, fmax


ctypedef fused floating:
    float
    double


cdef inline void _axpy(floating a, const floating* x, floating* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] += a * x[i]


cdef inline floating _dot(const floating* x, const floating* y, Py_ssize_t n) noexcept nogil:
    cdef floating acc = 0
    cdef Py_ssize_t i
    for i in range(n):
        acc += x[i] * y[i]
    return acc


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] kernel,
                   int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t h_out = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t w_out = (w + 2 * padding - kw) // stride + 1

    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((b, ci, h + 2 * padding, w + 2 * padding), dtype=dtype)
    xp_arr[:, :, padding:padding + h, padding:padding + w] = x
    out_arr = np.zeros((b, co, h_out, w_out), dtype=dtype)

    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, io, ic, i, j, oh, ow, ih
    cdef floating wv

    with nogil:
        for ib in range(b):
            for io in range(co):
                for ic in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            wv = kernel[io, ic, i, j]
                            if stride == 1:
                                for oh in range(h_out):
                                    _axpy(wv, &xp[ib, ic, oh + i, j], &out[ib, io, oh, 0], w_out)
                            else:
                                for oh in range(h_out):
                                    ih = oh * stride + i
                                    for ow in range(w_out):
                                        out[ib, io, oh, ow] += wv * xp[ib, ic, ih, ow * stride + j]
    return out_arr


def conv2d_grad_kernel(floating[:, :, :, ::1] grad_out, floating[:, :, :, ::1] x,
                       int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = grad_out.shape[1]
    cdef Py_ssize_t h_out = grad_out.shape[2], w_out = grad_out.shape[3]

    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((b, ci, h + 2 * padding, w + 2 * padding), dtype=dtype)
    xp_arr[:, :, padding:padding + h, padding:padding + w] = x
    gk_arr = np.zeros((co, ci, kh, kw), dtype=dtype)

    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef floating[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t ib, io, ic, i, j, oh, ow, ih
    cdef floating acc

    with nogil:
        for io in range(co):
            for ic in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0
                        if stride == 1:
                            for ib in range(b):
                                for oh in range(h_out):
                                    acc += _dot(&grad_out[ib, io, oh, 0], &xp[ib, ic, oh + i, j], w_out)
                        else:
                            for ib in range(b):
                                for oh in range(h_out):
                                    ih = oh * stride + i
                                    for ow in range(w_out):
                                        acc += grad_out[ib, io, oh, ow] * xp[ib, ic, ih, ow * stride + j]
                        gk[io, ic, i, j] = acc
    return gk_arr


def conv2d_grad_input(floating[:, :, :, ::1] grad_out, floating[:, :, :, ::1] kernel,
                      int h, int w, int stride, int padding):
    cdef Py_ssize_t b = grad_out.shape[0], co = kernel.shape[0], ci = kernel.shape[1]
    cdef Py_ssize_t kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t h_out = grad_out.shape[2], w_out = grad_out.shape[3]

    dtype = np.float32 if floating is float else np.float64
    gxp_arr = np.zeros((b, ci, h + 2 * padding, w + 2 * padding), dtype=dtype)

    cdef floating[:, :, :, ::1] gxp = gxp_arr
    cdef floating[:, :, :, ::1] g = grad_out
    cdef Py_ssize_t ib, io, ic, i, j, oh, ow, ih
    cdef floating wv

    with nogil:
        for ib in range(b):
            for ic in range(ci):
                for io in range(co):
                    for i in range(kh):
                        for j in range(kw):
                            wv = kernel[io, ic, i, j]
                            if stride == 1:
                                for oh in range(h_out):
                                    _axpy(wv, &g[ib, io, oh, 0], &gxp[ib, ic, oh + i, j], w_out)
                            else:
                                for oh in range(h_out):
                                    ih = oh * stride + i
                                    for ow in range(w_out):
                                        gxp[ib, ic, ih, ow * stride + j] += wv * g[ib, io, oh, ow]
    if padding:
        return np.ascontiguousarray(gxp_arr[:, :, padding:padding + h, padding:padding + w])
    return gxp_arr


def nlm_filter(double[:, ::1] img, double h, int patch_size, int search_window,
               double sigma2):
    cdef Py_ssize_t hh = img.shape[0], ww = img.shape[1]
    cdef int f = patch_size // 2
    cdef int t = search_window // 2
    cdef int pad = t + f

    a_arr = np.pad(np.asarray(img), pad, mode="edge")
    out_arr = np.zeros((hh, ww), dtype=np.float64)
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t i, j
    cdef int di, dj, pi, pj
    cdef double inv_h2 = 1.0 / (h * h)
    cdef double inv_np = 1.0 / (patch_size * patch_size)
    cdef double d2, diff, wgt, acc, wsum

    with nogil:
        for i in range(hh):
            for j in range(ww):
                acc = 0.0
                wsum = 0.0
                for di in range(-t, t + 1):
                    for dj in range(-t, t + 1):
                        d2 = 0.0
                        for pi in range(-f, f + 1):
                            for pj in range(-f, f + 1):
                                diff = (a[pad + i + di + pi, pad + j + dj + pj]
                                        - a[pad + i + pi, pad + j + pj])
                                d2 += diff * diff
                        d2 *= inv_np
                        wgt = exp(-fmax(d2 - 2.0 * sigma2, 0.0) * inv_h2)
                        acc += wgt * a[pad + i + di, pad + j + dj]
                        wsum += wgt
                out[i, j] = acc / wsum
    return out_arr
