# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM gate kernels.

Gate layout along the last axis of ``pre``/``gates`` is [i | f | o | g].
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


def lstm_forward(double[:, ::1] pre, double[:, ::1] c_prev):
    cdef Py_ssize_t B = pre.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    if pre.shape[1] != 4 * H or c_prev.shape[0] != B:
        raise ValueError("lstm_forward: pre must be (B, 4H) for c_prev (B, H)")
    gates_arr = np.empty((B, 4 * H), dtype=np.float64)
    c_arr = np.empty((B, H), dtype=np.float64)
    tc_arr = np.empty((B, H), dtype=np.float64)
    h_arr = np.empty((B, H), dtype=np.float64)
    cdef double[:, ::1] gates = gates_arr
    cdef double[:, ::1] c = c_arr
    cdef double[:, ::1] tc = tc_arr
    cdef double[:, ::1] h = h_arr
    cdef Py_ssize_t b, j
    cdef double ig, fg, og, gg, cv, t
    with nogil:
        for b in range(B):
            for j in range(H):
                ig = _sigmoid(pre[b, j])
                fg = _sigmoid(pre[b, H + j])
                og = _sigmoid(pre[b, 2 * H + j])
                gg = tanh(pre[b, 3 * H + j])
                gates[b, j] = ig
                gates[b, H + j] = fg
                gates[b, 2 * H + j] = og
                gates[b, 3 * H + j] = gg
                cv = fg * c_prev[b, j] + ig * gg
                t = tanh(cv)
                c[b, j] = cv
                tc[b, j] = t
                h[b, j] = og * t
    return gates_arr, c_arr, tc_arr, h_arr


def lstm_backward(double[:, ::1] gates, double[:, ::1] c_prev,
                  double[:, ::1] tc, double[:, ::1] dh, double[:, ::1] dc):
    cdef Py_ssize_t B = c_prev.shape[0]
    cdef Py_ssize_t H = c_prev.shape[1]
    dpre_arr = np.empty((B, 4 * H), dtype=np.float64)
    dcp_arr = np.empty((B, H), dtype=np.float64)
    cdef double[:, ::1] dpre = dpre_arr
    cdef double[:, ::1] dcp = dcp_arr
    cdef Py_ssize_t b, j
    cdef double ig, fg, og, gg, t, dct
    with nogil:
        for b in range(B):
            for j in range(H):
                ig = gates[b, j]
                fg = gates[b, H + j]
                og = gates[b, 2 * H + j]
                gg = gates[b, 3 * H + j]
                t = tc[b, j]
                dct = dc[b, j] + dh[b, j] * og * (1.0 - t * t)
                dpre[b, j] = dct * gg * ig * (1.0 - ig)
                dpre[b, H + j] = dct * c_prev[b, j] * fg * (1.0 - fg)
                dpre[b, 2 * H + j] = dh[b, j] * t * og * (1.0 - og)
                dpre[b, 3 * H + j] = dct * ig * (1.0 - gg * gg)
                dcp[b, j] = dct * fg
    return dpre_arr, dcp_arr
