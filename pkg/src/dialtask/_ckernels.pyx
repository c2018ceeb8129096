# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the numpy kernels in dialtask.kernels.

Single-threaded by design: training reproducibility depends on a fixed
summation order. Shapes and semantics match the numpy fallback exactly.
gelu/gelu_grad are compiled here too but dialtask.kernels does not bind them:
the scalar tanh loop loses to numpy's vectorized tanh, and keeping them lets
benchmarks/bench_kernels.py show that measurement.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xf = arr.reshape(-1)
    cdef double[::1] of = out.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, u
    for i in range(n):
        v = xf[i]
        u = GELU_C * (v + GELU_A * v * v * v)
        of[i] = 0.5 * v * (1.0 + tanh(u))
    return out


def gelu_grad(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xf = arr.reshape(-1)
    cdef double[::1] of = out.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, u, t, du
    for i in range(n):
        v = xf[i]
        u = GELU_C * (v + GELU_A * v * v * v)
        t = tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        of[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
    return out


def softmax_rows(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("softmax_rows expects a 2-D array")
    out = np.empty_like(arr)
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, r = xv.shape[0], c = xv.shape[1]
    cdef double m, s
    for i in range(r):
        m = xv[i, 0]
        for j in range(1, c):
            if xv[i, j] > m:
                m = xv[i, j]
        s = 0.0
        for j in range(c):
            ov[i, j] = exp(xv[i, j] - m)
            s += ov[i, j]
        for j in range(c):
            ov[i, j] /= s
    return out


def softmax_rows_grad(p, dp):
    parr = np.ascontiguousarray(p, dtype=np.float64)
    darr = np.ascontiguousarray(dp, dtype=np.float64)
    if parr.shape != darr.shape or parr.ndim != 2:
        raise ValueError("softmax_rows_grad expects matching 2-D arrays")
    out = np.empty_like(parr)
    cdef double[:, ::1] pv = parr
    cdef double[:, ::1] dv = darr
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, r = pv.shape[0], c = pv.shape[1]
    cdef double inner
    for i in range(r):
        inner = 0.0
        for j in range(c):
            inner += dv[i, j] * pv[i, j]
        for j in range(c):
            ov[i, j] = pv[i, j] * (dv[i, j] - inner)
    return out


def layernorm_rows(x, gain, bias, double eps=1e-5):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gain, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("layernorm_rows expects a 2-D array")
    y = np.empty_like(arr)
    xhat = np.empty_like(arr)
    rstd = np.empty((arr.shape[0], 1))
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] hv = xhat
    cdef double[:, ::1] rv = rstd
    cdef double[::1] gv = g
    cdef double[::1] bv = b
    cdef Py_ssize_t i, j, r = xv.shape[0], c = xv.shape[1]
    cdef double mu, var, d, rs
    for i in range(r):
        mu = 0.0
        for j in range(c):
            mu += xv[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = xv[i, j] - mu
            var += d * d
        var /= c
        rs = 1.0 / sqrt(var + eps)
        rv[i, 0] = rs
        for j in range(c):
            hv[i, j] = (xv[i, j] - mu) * rs
            yv[i, j] = hv[i, j] * gv[j] + bv[j]
    return y, xhat, rstd


def layernorm_rows_grad(dy, xhat, rstd, gain):
    dyarr = np.ascontiguousarray(dy, dtype=np.float64)
    harr = np.ascontiguousarray(xhat, dtype=np.float64)
    rarr = np.ascontiguousarray(rstd, dtype=np.float64)
    g = np.ascontiguousarray(gain, dtype=np.float64)
    dx = np.empty_like(dyarr)
    dgain = np.zeros(dyarr.shape[1])
    dbias = np.zeros(dyarr.shape[1])
    cdef double[:, ::1] dv = dyarr
    cdef double[:, ::1] hv = harr
    cdef double[:, ::1] rv = rarr
    cdef double[::1] gv = g
    cdef double[:, ::1] xv = dx
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef Py_ssize_t i, j, r = dv.shape[0], c = dv.shape[1]
    cdef double m1, m2, dh
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            dh = dv[i, j] * gv[j]
            m1 += dh
            m2 += dh * hv[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            dh = dv[i, j] * gv[j]
            xv[i, j] = rv[i, 0] * (dh - m1 - hv[i, j] * m2)
            dgv[j] += dv[i, j] * hv[i, j]
            dbv[j] += dv[i, j]
    return dx, dgain, dbias
