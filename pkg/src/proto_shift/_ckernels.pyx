# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fixed-order kernels.

Every reduction accumulates left to right over the contracted index, matching
the numpy fallback in ``_pykernels`` bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _matmul_rows(const double* a, const double* b, double* c,
                       Py_ssize_t m, Py_ssize_t kk, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k, j
    cdef double aik
    cdef const double* brow
    cdef double* crow
    for i in range(m):
        crow = c + i * n
        for k in range(kk):
            aik = a[i * kk + k]
            brow = b + k * n
            for j in range(n):
                crow[j] = crow[j] + aik * brow[j]


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    if b.shape[0] != kk:
        raise ValueError(f"matmul: inner dims differ, {kk} vs {b.shape[0]}")
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    if m == 0 or n == 0 or kk == 0:
        return out
    with nogil:
        _matmul_rows(&a[0, 0], &b[0, 0], &c[0, 0], m, kk, n)
    return out


def pairwise_sq_dist(const double[:, ::1] q, const double[:, ::1] p):
    cdef Py_ssize_t nq = q.shape[0], d = q.shape[1], npro = p.shape[0]
    cdef Py_ssize_t i, n, j
    cdef double diff, acc
    if p.shape[1] != d:
        raise ValueError(f"pairwise_sq_dist: feature dims differ, {d} vs {p.shape[1]}")
    out = np.empty((nq, npro), dtype=np.float64)
    cdef double[:, ::1] r = out
    with nogil:
        for i in range(nq):
            for n in range(npro):
                acc = 0.0
                for j in range(d):
                    diff = q[i, j] - p[n, j]
                    acc = acc + diff * diff
                r[i, n] = acc
    return out


def pairwise_sq_dist_backward(const double[:, ::1] q, const double[:, ::1] p,
                              const double[:, ::1] g):
    """Gradients of sum(g * D) w.r.t. q and p, accumulated in fixed order."""
    cdef Py_ssize_t nq = q.shape[0], d = q.shape[1], npro = p.shape[0]
    cdef Py_ssize_t i, n, j
    cdef double two_g, diff
    if p.shape[1] != d or g.shape[0] != nq or g.shape[1] != npro:
        raise ValueError("pairwise_sq_dist_backward: inconsistent shapes")
    gq_arr = np.zeros((nq, d), dtype=np.float64)
    gp_arr = np.zeros((npro, d), dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gp = gp_arr
    with nogil:
        for i in range(nq):
            for n in range(npro):
                two_g = 2.0 * g[i, n]
                for j in range(d):
                    diff = q[i, j] - p[n, j]
                    gq[i, j] = gq[i, j] + two_g * diff
                    gp[n, j] = gp[n, j] - two_g * diff
    return gq_arr, gp_arr
