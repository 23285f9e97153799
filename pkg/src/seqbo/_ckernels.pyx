# cython: language_level=3
"""Compiled inner loops for kernel evaluation."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def coded_dot(const Py_ssize_t[:, ::1] A, const Py_ssize_t[:, ::1] B,
              const double[:, ::1] G):
    """Dot products of blockwise encodings given their symbol codes.

    ``out[i, j] = sum_p G[A[i, p], B[j, p]]``.
    """
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], L = A.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double acc
    if B.shape[1] != L:
        raise ValueError("code arrays have different sequence lengths")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef const Py_ssize_t* a
    cdef const Py_ssize_t* b
    with nogil:
        for i in range(n):
            a = &A[i, 0]
            for j in range(m):
                b = &B[j, 0]
                acc = 0.0
                for p in range(L):
                    acc = acc + G[a[p], b[p]]
                o[i, j] = acc
    return out


def coded_sqnorm(const Py_ssize_t[:, ::1] A, const double[:, ::1] G):
    cdef Py_ssize_t n = A.shape[0], L = A.shape[1]
    cdef Py_ssize_t i, p
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for p in range(L):
                acc = acc + G[A[i, p], A[i, p]]
            o[i] = acc
    return out


def sqdist(const double[:, ::1] X, const double[:, ::1] Y):
    """Pairwise squared Euclidean distances by explicit differences."""
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    if Y.shape[1] != d:
        raise ValueError("inputs have different dimensions")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = X[i, k] - Y[j, k]
                    acc = acc + diff * diff
                o[i, j] = acc
    return out
