# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled SGD inner loops (hot-path backend).

Same contracts as `_python.py`; see that module for the step semantics.
"""

import numpy as np

from libc.math cimport exp, isfinite

BACKEND_NAME = "cython"


def sgd_quadratic(double[:, ::1] X, double[::1] y, w0, long[:, ::1] idx,
                  double[::1] eta, double lam):
    w_arr = np.array(w0, dtype=np.float64, copy=True)
    cdef double[::1] w = w_arr
    cdef Py_ssize_t n_steps = idx.shape[0]
    cdef Py_ssize_t batch = idx.shape[1]
    cdef Py_ssize_t d = X.shape[1]
    cdef double[::1] grad = np.empty(d, dtype=np.float64)
    cdef Py_ssize_t s, b, j, k
    cdef double resid, inv_batch = 1.0 / batch
    cdef bint ok

    for s in range(n_steps):
        for k in range(d):
            grad[k] = lam * w[k]
        for b in range(batch):
            j = idx[s, b]
            resid = 0.0
            for k in range(d):
                resid += X[j, k] * w[k]
            resid = (resid - y[j]) * inv_batch
            for k in range(d):
                grad[k] += resid * X[j, k]
        ok = True
        for k in range(d):
            w[k] -= eta[s] * grad[k]
            if not isfinite(w[k]):
                ok = False
        if not ok:
            return w_arr, s
    return w_arr, -1


def sgd_logistic(double[:, ::1] X, long[::1] y, w0, long[:, ::1] idx,
                 double[::1] eta, double lam, int n_classes):
    cdef Py_ssize_t d = X.shape[1]
    w_arr = np.array(w0, dtype=np.float64, copy=True).reshape(n_classes, d)
    cdef double[:, ::1] W = w_arr
    cdef Py_ssize_t n_steps = idx.shape[0]
    cdef Py_ssize_t batch = idx.shape[1]
    cdef double[:, ::1] grad = np.empty((n_classes, d), dtype=np.float64)
    cdef double[::1] scores = np.empty(n_classes, dtype=np.float64)
    cdef Py_ssize_t s, b, j, c, k
    cdef long label
    cdef double smax, ssum, coef, inv_batch = 1.0 / batch
    cdef bint ok

    for s in range(n_steps):
        for c in range(n_classes):
            for k in range(d):
                grad[c, k] = lam * W[c, k]
        for b in range(batch):
            j = idx[s, b]
            label = y[j]
            smax = -1e308
            for c in range(n_classes):
                scores[c] = 0.0
                for k in range(d):
                    scores[c] += W[c, k] * X[j, k]
                if scores[c] > smax:
                    smax = scores[c]
            ssum = 0.0
            for c in range(n_classes):
                scores[c] = exp(scores[c] - smax)
                ssum += scores[c]
            for c in range(n_classes):
                coef = scores[c] / ssum
                if c == label:
                    coef -= 1.0
                coef *= inv_batch
                for k in range(d):
                    grad[c, k] += coef * X[j, k]
        ok = True
        for c in range(n_classes):
            for k in range(d):
                W[c, k] -= eta[s] * grad[c, k]
                if not isfinite(W[c, k]):
                    ok = False
        if not ok:
            return w_arr.reshape(-1), s
    return w_arr.reshape(-1), -1
