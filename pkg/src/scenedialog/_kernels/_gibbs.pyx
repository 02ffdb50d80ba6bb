# cython: language_level=3
"""Collapsed Gibbs sweeps over flat token arrays (compiled backend)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def gibbs_sweep(const int[::1] words, const int[::1] docs, int[::1] z,
                long long[:, ::1] ndk, long long[:, ::1] nkw, long long[::1] nk,
                double alpha, const double[:, ::1] beta_kw, const double[::1] beta_k,
                const double[::1] uniforms):
    cdef Py_ssize_t n_tok = words.shape[0]
    cdef Py_ssize_t K = nk.shape[0]
    cdef Py_ssize_t i, k, new_k
    cdef int w, d, old
    cdef double acc, target
    cdef double[::1] cum = np.empty(K, dtype=np.float64)
    for i in range(n_tok):
        w = words[i]
        d = docs[i]
        old = z[i]
        ndk[d, old] -= 1
        nkw[old, w] -= 1
        nk[old] -= 1
        acc = 0.0
        for k in range(K):
            acc = acc + (<double>ndk[d, k] + alpha) * (<double>nkw[k, w] + beta_kw[k, w]) / (<double>nk[k] + beta_k[k])
            cum[k] = acc
        target = uniforms[i] * acc
        new_k = K - 1
        for k in range(K):
            if cum[k] > target:
                new_k = k
                break
        z[i] = <int>new_k
        ndk[d, new_k] += 1
        nkw[new_k, w] += 1
        nk[new_k] += 1


def foldin_sweep(const int[::1] words, int[::1] z, long long[::1] nd,
                 const double[:, ::1] phi, double alpha, const double[::1] uniforms):
    cdef Py_ssize_t n_tok = words.shape[0]
    cdef Py_ssize_t K = nd.shape[0]
    cdef Py_ssize_t i, k, new_k
    cdef int w
    cdef double acc, target
    cdef double[::1] cum = np.empty(K, dtype=np.float64)
    for i in range(n_tok):
        w = words[i]
        nd[z[i]] -= 1
        acc = 0.0
        for k in range(K):
            acc = acc + (<double>nd[k] + alpha) * phi[k, w]
            cum[k] = acc
        target = uniforms[i] * acc
        new_k = K - 1
        for k in range(K):
            if cum[k] > target:
                new_k = k
                break
        z[i] = <int>new_k
        nd[new_k] += 1
