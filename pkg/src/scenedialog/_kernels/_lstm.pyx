# cython: language_level=3
"""Single-step LSTM kernels (compiled backend); see _lstm_py for the contract."""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


cdef inline double _sigmoid(double a) nogil:
    return 0.5 * (1.0 + tanh(0.5 * a))


def lstm_step_forward(const double[:, ::1] Wx, const double[:, ::1] Wh, const double[::1] b,
                      const double[::1] x, const double[::1] h_prev, const double[::1] c_prev):
    cdef Py_ssize_t H = h_prev.shape[0]
    cdef Py_ssize_t D = x.shape[0]
    cdef Py_ssize_t r, j
    cdef double acc
    h_arr = np.empty(H)
    c_arr = np.empty(H)
    gates_arr = np.empty(4 * H)
    cdef double[::1] h = h_arr
    cdef double[::1] c = c_arr
    cdef double[::1] gates = gates_arr
    for r in range(4 * H):
        acc = 0.0
        for j in range(D):
            acc += Wx[r, j] * x[j]
        for j in range(H):
            acc += Wh[r, j] * h_prev[j]
        acc += b[r]
        if 2 * H <= r < 3 * H:
            gates[r] = tanh(acc)
        else:
            gates[r] = _sigmoid(acc)
    for j in range(H):
        c[j] = gates[H + j] * c_prev[j] + gates[j] * gates[2 * H + j]
        h[j] = gates[3 * H + j] * tanh(c[j])
    return h_arr, c_arr, gates_arr


def lstm_step_backward(const double[:, ::1] Wx, const double[:, ::1] Wh,
                       const double[::1] x, const double[::1] h_prev, const double[::1] c_prev,
                       const double[::1] c, const double[::1] gates,
                       const double[::1] dh, const double[::1] dc,
                       double[:, ::1] dWx, double[:, ::1] dWh, double[::1] db):
    cdef Py_ssize_t H = h_prev.shape[0]
    cdef Py_ssize_t D = x.shape[0]
    cdef Py_ssize_t r, j
    cdef double i, f, g, o, tc, dct, a
    dx_arr = np.zeros(D)
    dh_arr = np.zeros(H)
    dc_arr = np.empty(H)
    cdef double[::1] dx = dx_arr
    cdef double[::1] dhp = dh_arr
    cdef double[::1] dcp = dc_arr
    cdef double[::1] da = np.empty(4 * H)
    for j in range(H):
        i = gates[j]
        f = gates[H + j]
        g = gates[2 * H + j]
        o = gates[3 * H + j]
        tc = tanh(c[j])
        dct = dc[j] + dh[j] * o * (1.0 - tc * tc)
        da[j] = dct * g * i * (1.0 - i)
        da[H + j] = dct * c_prev[j] * f * (1.0 - f)
        da[2 * H + j] = dct * i * (1.0 - g * g)
        da[3 * H + j] = dh[j] * tc * o * (1.0 - o)
        dcp[j] = dct * f
    for r in range(4 * H):
        a = da[r]
        db[r] += a
        for j in range(D):
            dWx[r, j] += a * x[j]
            dx[j] += Wx[r, j] * a
        for j in range(H):
            dWh[r, j] += a * h_prev[j]
            dhp[j] += Wh[r, j] * a
    return dx_arr, dh_arr, dc_arr
