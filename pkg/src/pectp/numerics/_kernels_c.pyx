# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels mirroring ``_kernels_py``."""

import numpy as np
cimport cython
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


cdef inline double _tanh(double u) nogil:
    # branch-free so the loop vectorizes; exp overflow to inf still gives 1
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mu, var, r, v
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mu
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                v = (x[i, j] - mu) * r
                xhat[i, j] = <real>v
                y[i, j] = <real>(v * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double m1, m2, dh
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dh = g[i, j] * gamma[j]
                m1 += dh
                m2 += dh * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dh = g[i, j] * gamma[j]
                dx[i, j] = <real>(rstd[i] * (dh - m1 - xhat[i, j] * m2))
    return dx_arr, dgamma_arr.astype(dtype, copy=False), dbeta_arr.astype(dtype, copy=False)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                y[i, j] = <real>e
                s += e
            for j in range(d):
                y[i, j] = <real>(y[i, j] / s)
    return y_arr


def softmax_backward(real[:, ::1] g, real[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = <real>(y[i, j] * (g[i, j] - s))
    return dx_arr


def gelu_forward(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0] * x.shape[1], i
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((x.shape[0], x.shape[1]), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    if m == 0:
        return y_arr
    cdef real* xp = &x[0, 0]
    cdef real* yp = &y[0, 0]
    cdef double v
    with nogil:
        for i in range(m):
            v = xp[i]
            yp[i] = <real>(0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_K * v * v * v))))
    return y_arr


def gelu_backward(real[:, ::1] g, real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0] * x.shape[1], i
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((x.shape[0], x.shape[1]), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    if m == 0:
        return dx_arr
    cdef real* xp = &x[0, 0]
    cdef real* gp = &g[0, 0]
    cdef real* dp = &dx[0, 0]
    cdef double v, v2, t
    with nogil:
        for i in range(m):
            v = xp[i]
            v2 = v * v
            t = _tanh(GELU_C * (v + GELU_K * v2 * v))
            dp[i] = <real>(gp[i] * (0.5 * (1.0 + t)
                           + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v2)))
    return dx_arr
