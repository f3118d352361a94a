# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused LSTM gate math and the exponential smoothing
recursion. Same signatures and semantics as ``_kernels_py``."""

import numpy as np
from libc.math cimport exp, expm1


cdef inline double _tanh(double x) nogil:
    # expm1 form: accurate near 0 and several times faster than libm tanh
    cdef double e
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    e = expm1(2.0 * x)
    return e / (e + 2.0)


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def lstm_pointwise_forward(const double[:, ::1] z, const double[:, ::1] c_prev):
    cdef Py_ssize_t B = c_prev.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    cdef Py_ssize_t b, j
    cdef double i, f, g, o, c
    h_arr = np.empty((B, H))
    c_arr = np.empty((B, H))
    gates_arr = np.empty((B, 4 * H))
    tc_arr = np.empty((B, H))
    cdef double[:, ::1] h_out = h_arr
    cdef double[:, ::1] c_out = c_arr
    cdef double[:, ::1] gates = gates_arr
    cdef double[:, ::1] tc = tc_arr
    with nogil:
        for b in range(B):
            for j in range(H):
                i = _sigmoid(z[b, j])
                f = _sigmoid(z[b, H + j])
                g = _tanh(z[b, 2 * H + j])
                o = _sigmoid(z[b, 3 * H + j])
                gates[b, j] = i
                gates[b, H + j] = f
                gates[b, 2 * H + j] = g
                gates[b, 3 * H + j] = o
                c = f * c_prev[b, j] + i * g
                c_out[b, j] = c
                tc[b, j] = _tanh(c)
                h_out[b, j] = o * tc[b, j]
    return h_arr, c_arr, gates_arr, tc_arr


def lstm_pointwise_backward(const double[:, ::1] dh, const double[:, ::1] dc,
                            const double[:, ::1] gates, const double[:, ::1] c_prev,
                            const double[:, ::1] tanh_c):
    cdef Py_ssize_t B = c_prev.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    cdef Py_ssize_t b, j
    cdef double i, f, g, o, t, dct
    dz_arr = np.empty((B, 4 * H))
    dcp_arr = np.empty((B, H))
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dcp = dcp_arr
    with nogil:
        for b in range(B):
            for j in range(H):
                i = gates[b, j]
                f = gates[b, H + j]
                g = gates[b, 2 * H + j]
                o = gates[b, 3 * H + j]
                t = tanh_c[b, j]
                dct = dc[b, j] + dh[b, j] * o * (1.0 - t * t)
                dz[b, j] = dct * g * i * (1.0 - i)
                dz[b, H + j] = dct * c_prev[b, j] * f * (1.0 - f)
                dz[b, 2 * H + j] = dct * i * (1.0 - g * g)
                dz[b, 3 * H + j] = dh[b, j] * t * o * (1.0 - o)
                dcp[b, j] = dct * f
    return dz_arr, dcp_arr


def ses_sse(y, alphas):
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] av = np.ascontiguousarray(alphas, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0]
    cdef Py_ssize_t k = av.shape[0]
    cdef Py_ssize_t a, t
    cdef double lvl, err, acc, alpha
    sse_arr = np.empty(k)
    lvl_arr = np.empty(k)
    cdef double[::1] sse = sse_arr
    cdef double[::1] lv = lvl_arr
    with nogil:
        for a in range(k):
            alpha = av[a]
            lvl = yv[0]
            acc = 0.0
            for t in range(1, n):
                err = yv[t] - lvl
                acc = acc + err * err
                lvl = alpha * yv[t] + (1.0 - alpha) * lvl
            sse[a] = acc
            lv[a] = lvl
    return sse_arr, lvl_arr
