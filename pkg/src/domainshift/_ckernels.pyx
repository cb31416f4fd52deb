# cython: language_level=3
"""Compiled kernels for the linear softmax classifier.

Same signatures and parameter layout as ``_pykernels``. Reductions run
sequentially over examples in input order so results are reproducible.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef void _row_probs(const double[::1] theta, const double[:, ::1] X,
                     Py_ssize_t i, Py_ssize_t m, Py_ssize_t C,
                     double[::1] p, double* zy_out, Py_ssize_t yi,
                     double* logz_out) noexcept nogil:
    cdef Py_ssize_t c, j
    cdef double acc, zmax, s
    zmax = -1e308
    for c in range(C):
        acc = theta[C * m + c]
        for j in range(m):
            acc = acc + theta[c * m + j] * X[i, j]
        p[c] = acc
        if acc > zmax:
            zmax = acc
    if yi >= 0:
        zy_out[0] = p[yi]
    s = 0.0
    for c in range(C):
        p[c] = exp(p[c] - zmax)
        s = s + p[c]
    for c in range(C):
        p[c] = p[c] / s
    logz_out[0] = log(s) + zmax


def softmax_xent(const double[::1] theta, const double[:, ::1] X,
                 const cnp.int64_t[::1] y, int n_classes):
    """Mean cross-entropy and its gradient w.r.t. ``theta``."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = X.shape[1]
    cdef Py_ssize_t C = n_classes
    cdef Py_ssize_t i, c, j
    cdef double zy = 0.0, logz = 0.0, total = 0.0, d, inv_n
    grad_arr = np.zeros(C * m + C, dtype=np.float64)
    p_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[::1] p = p_arr
    inv_n = 1.0 / n
    with nogil:
        for i in range(n):
            _row_probs(theta, X, i, m, C, p, &zy, y[i], &logz)
            total = total + (logz - zy)
            for c in range(C):
                d = p[c]
                if c == y[i]:
                    d = d - 1.0
                d = d * inv_n
                for j in range(m):
                    grad[c * m + j] = grad[c * m + j] + d * X[i, j]
                grad[C * m + c] = grad[C * m + c] + d
    return total * inv_n, grad_arr


def softmax_xent_input_grad(const double[::1] theta, const double[:, ::1] X,
                            const cnp.int64_t[::1] y, int n_classes):
    """Gradient of the mean cross-entropy w.r.t. every input row."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = X.shape[1]
    cdef Py_ssize_t C = n_classes
    cdef Py_ssize_t i, c, j
    cdef double zy = 0.0, logz = 0.0, d, inv_n
    out_arr = np.zeros((n, m), dtype=np.float64)
    p_arr = np.empty(C, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] p = p_arr
    inv_n = 1.0 / n
    with nogil:
        for i in range(n):
            _row_probs(theta, X, i, m, C, p, &zy, y[i], &logz)
            for c in range(C):
                d = p[c]
                if c == y[i]:
                    d = d - 1.0
                d = d * inv_n
                for j in range(m):
                    out[i, j] = out[i, j] + d * theta[c * m + j]
    return out_arr


def softmax_probs(const double[::1] theta, const double[:, ::1] X, int n_classes):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = X.shape[1]
    cdef Py_ssize_t C = n_classes
    cdef Py_ssize_t i, c
    cdef double zy = 0.0, logz = 0.0
    out_arr = np.empty((n, C), dtype=np.float64)
    p_arr = np.empty(C, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] p = p_arr
    with nogil:
        for i in range(n):
            _row_probs(theta, X, i, m, C, p, &zy, -1, &logz)
            for c in range(C):
                out[i, c] = p[c]
    return out_arr
