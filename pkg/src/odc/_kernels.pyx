# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, pow, INFINITY

cnp.import_array()

INVERSE_POWER = 0
LOG = 1


def nearest_neighbors(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], d = A.shape[1]
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, k, best_j
    cdef double best, s, t
    for i in range(n):
        best = INFINITY
        best_j = 0
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = A[i, k] - B[j, k]
                s += t * t
            if s < best:
                best = s
                best_j = j
        idx[i] = best_j
        dist[i] = best
    return idx_arr, dist_arr


def min_pairwise_distance(x):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, k, bi = -1, bj = -1
    cdef double best = INFINITY, s, t
    if n < 2:
        return np.inf, -1, -1
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = X[i, k] - X[j, k]
                s += t * t
            if s < best:
                best = s
                bi = i
                bj = j
    return sqrt(best), bi, bj


cdef inline double _value(double d2, int kind, double c, double alpha) nogil:
    if kind == 0:
        return c * pow(d2, -0.5 * alpha)
    return -0.5 * c * log(d2)


cdef inline double _coef(double d2, int kind, double c, double alpha) nogil:
    if kind == 0:
        return -alpha * c * pow(d2, -0.5 * alpha - 1.0)
    return -c / d2


def pair_potential(x, int kind, double c, double alpha):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double s, t, val
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = X[i, k] - X[j, k]
                s += t * t
            val = _value(s, kind, c, alpha)
            out[i] += val
            out[j] += val
    for i in range(n):
        out[i] /= (n - 1)
    return out_arr


def pair_potential_vjp(x, g, int kind, double c, double alpha):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double s, t, w
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = X[i, k] - X[j, k]
                s += t * t
            w = (G[i] + G[j]) * _coef(s, kind, c, alpha)
            for k in range(d):
                t = w * (X[i, k] - X[j, k])
                out[i, k] += t
                out[j, k] -= t
    for i in range(n):
        for k in range(d):
            out[i, k] /= (n - 1)
    return out_arr


def linear_sum_assignment(cost):
    cdef double[:, ::1] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0]
    if C.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef long long[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    assignment[p_arr[1:] - 1] = np.arange(n)
    return assignment
