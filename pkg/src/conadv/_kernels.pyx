# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: NHWC convolution lowering, 2x2 max pooling, fused batch norm.

Every loop runs without the GIL so graph evaluations on different threads
overlap. Accumulation order matches ``_kernels_py`` exactly, so both
backends give bitwise-identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1
    cdef Py_ssize_t wo = w + 2 * pad - kw + 1
    out_arr = np.zeros((n, ho, wo, kh, kw, c), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for di in range(kh):
                        si = i + di - pad
                        if si < 0 or si >= h:
                            continue
                        for dj in range(kw):
                            sj = j + dj - pad
                            if sj < 0 or sj >= w:
                                continue
                            for ch in range(c):
                                out[b, i, j, di, dj, ch] = x[b, si, sj, ch]
    return out_arr


def col2im(const double[:, :, :, :, :, ::1] cols, Py_ssize_t h, Py_ssize_t w, int pad):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], c = cols.shape[5]
    padded_arr = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=np.float64)
    cdef double[:, :, :, ::1] padded = padded_arr
    cdef Py_ssize_t b, i, j, di, dj, ch
    with nogil:
        # (di, dj) outermost per image: same addition order as the slice loop
        for b in range(n):
            for di in range(kh):
                for dj in range(kw):
                    for i in range(ho):
                        for j in range(wo):
                            for ch in range(c):
                                padded[b, i + di, j + dj, ch] += cols[b, i, j, di, dj, ch]
    if pad == 0:
        return padded_arr
    return np.ascontiguousarray(padded_arr[:, pad:pad + h, pad:pad + w, :])


def maxpool2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, i, j, ch
    cdef double best, v
    cdef cnp.int8_t k
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        # window order (0,0) (0,1) (1,0) (1,1); first maximum wins
                        best = x[b, 2 * i, 2 * j, ch]
                        k = 0
                        v = x[b, 2 * i, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, 2 * i + 1, 2 * j, ch]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            k = 3
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = k
    return out_arr, arg_arr


def maxpool2_backward(const double[:, :, :, ::1] dout, const cnp.int8_t[:, :, :, ::1] arg,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, ch
    cdef cnp.int8_t k
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        k = arg[b, i, j, ch]
                        dx[b, 2 * i + (k >> 1), 2 * j + (k & 1), ch] = dout[b, i, j, ch]
    return dx_arr


def batchnorm_train_forward(const double[:, ::1] x, const double[::1] gamma,
                            const double[::1] beta, double eps):
    """Rows are positions, columns channels. Returns (y, xhat, mean, var, invstd)."""
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1], r, ch
    mean_arr = np.zeros(c)
    var_arr = np.zeros(c)
    invstd_arr = np.empty(c)
    y_arr = np.empty((m, c))
    xhat_arr = np.empty((m, c))
    cdef double[::1] mean = mean_arr, var = var_arr, invstd = invstd_arr
    cdef double[:, ::1] y = y_arr, xhat = xhat_arr
    cdef double d
    with nogil:
        for r in range(m):
            for ch in range(c):
                mean[ch] += x[r, ch]
        for ch in range(c):
            mean[ch] = mean[ch] / m
        for r in range(m):
            for ch in range(c):
                d = x[r, ch] - mean[ch]
                var[ch] += d * d
        for ch in range(c):
            var[ch] = var[ch] / m
            invstd[ch] = 1.0 / sqrt(var[ch] + eps)
        for r in range(m):
            for ch in range(c):
                d = (x[r, ch] - mean[ch]) * invstd[ch]
                xhat[r, ch] = d
                y[r, ch] = gamma[ch] * d + beta[ch]
    return y_arr, xhat_arr, mean_arr, var_arr, invstd_arr


def batchnorm_eval_forward(const double[:, ::1] x, const double[::1] gamma,
                           const double[::1] beta, const double[::1] mean,
                           const double[::1] var, double eps):
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1], r, ch
    invstd_arr = np.empty(c)
    y_arr = np.empty((m, c))
    xhat_arr = np.empty((m, c))
    cdef double[::1] invstd = invstd_arr
    cdef double[:, ::1] y = y_arr, xhat = xhat_arr
    cdef double d
    with nogil:
        for ch in range(c):
            invstd[ch] = 1.0 / sqrt(var[ch] + eps)
        for r in range(m):
            for ch in range(c):
                d = (x[r, ch] - mean[ch]) * invstd[ch]
                xhat[r, ch] = d
                y[r, ch] = gamma[ch] * d + beta[ch]
    return y_arr, xhat_arr, invstd_arr


def batchnorm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                       const double[::1] gamma, const double[::1] invstd, bint train):
    """Returns (dx, dgamma, dbeta); ``train`` differentiates through batch statistics."""
    cdef Py_ssize_t m = g.shape[0], c = g.shape[1], r, ch
    dbeta_arr = np.zeros(c)
    dgamma_arr = np.zeros(c)
    s1_arr = np.zeros(c)
    s2_arr = np.zeros(c)
    dx_arr = np.empty((m, c))
    cdef double[::1] dbeta = dbeta_arr, dgamma = dgamma_arr, s1 = s1_arr, s2 = s2_arr
    cdef double[:, ::1] dx = dx_arr
    cdef double dxh
    cdef double mm = <double>m
    with nogil:
        for r in range(m):
            for ch in range(c):
                dbeta[ch] += g[r, ch]
                dgamma[ch] += g[r, ch] * xhat[r, ch]
                dxh = g[r, ch] * gamma[ch]
                s1[ch] += dxh
                s2[ch] += dxh * xhat[r, ch]
        if train:
            for r in range(m):
                for ch in range(c):
                    dxh = g[r, ch] * gamma[ch]
                    dx[r, ch] = (invstd[ch] / mm) * (mm * dxh - s1[ch] - xhat[r, ch] * s2[ch])
        else:
            for r in range(m):
                for ch in range(c):
                    dx[r, ch] = g[r, ch] * gamma[ch] * invstd[ch]
    return dx_arr, dgamma_arr, dbeta_arr
