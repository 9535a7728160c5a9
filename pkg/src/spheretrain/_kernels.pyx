# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np

from cython.parallel cimport prange
from libc.math cimport sqrt, isfinite


def adam_rows(double[:, ::1] w, const double[:, ::1] g, double[:, ::1] m,
              double[:, ::1] v, double lr, double beta1, double beta2,
              double eps, double bc1, double bc2, bint project):
    cdef Py_ssize_t rows = w.shape[0], cols = w.shape[1]
    cdef Py_ssize_t i, j
    cdef double radial, gt, nrm
    for i in range(rows):
        radial = 0.0
        if project:
            for j in range(cols):
                radial += g[i, j] * w[i, j]
        nrm = 0.0
        for j in range(cols):
            gt = g[i, j] - radial * w[i, j]
            m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * gt
            v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * (gt * gt)
            w[i, j] -= lr * (m[i, j] / bc1) / (sqrt(v[i, j] / bc2) + eps)
            nrm += w[i, j] * w[i, j]
        if project:
            nrm = sqrt(nrm)
            if not (isfinite(nrm) and nrm > 0.0):
                return i
            for j in range(cols):
                w[i, j] /= nrm
    return -1


def assign_nearest(const double[:, ::1] x, const double[:, ::1] c,
                   const double[::1] c_sqnorm, int num_threads=1):
    # Cross products go through BLAS in row chunks; the distance expansion,
    # clamp and argmin are fused here without materializing the n x k matrix.
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], dim = x.shape[1]
    cdef Py_ssize_t chunk = 8192
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    cdef double[:, ::1] dots
    cdef Py_ssize_t start, stop, i, j, q, best_j
    cdef double xs, d, best, diff
    x_np = np.asarray(x)
    ct = np.asarray(c).T
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dots = np.dot(x_np[start:stop], ct)
        for i in prange(stop - start, nogil=True, num_threads=num_threads, schedule="static"):
            xs = 0.0
            for q in range(dim):
                xs = xs + x[start + i, q] * x[start + i, q]
            best = 1e308
            best_j = 0
            for j in range(k):
                d = xs + c_sqnorm[j] - 2.0 * dots[i, j]
                if d < 0.0:
                    d = 0.0
                if d < best:
                    best = d
                    best_j = j
            # exact distance to the winner; coincident points give 0
            best = 0.0
            for q in range(dim):
                diff = x[start + i, q] - c[best_j, q]
                best = best + diff * diff
            labels[start + i] = best_j
            dist[start + i] = best
    return labels_arr, dist_arr


def minibatch_update(double[:, ::1] centroids, double[::1] counts,
                     const double[:, ::1] batch, const long long[::1] labels):
    cdef Py_ssize_t k = centroids.shape[0], dim = centroids.shape[1]
    cdef Py_ssize_t n = batch.shape[0]
    sums_arr = np.zeros((k, dim), dtype=np.float64)
    nb_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    cdef double[::1] nb = nb_arr
    cdef Py_ssize_t i, j, q
    cdef double eta, mean
    for i in range(n):
        j = labels[i]
        nb[j] += 1.0
        for q in range(dim):
            sums[j, q] += batch[i, q]
    for j in range(k):
        if nb[j] > 0.0:
            eta = nb[j] / (counts[j] + nb[j])
            for q in range(dim):
                mean = sums[j, q] / nb[j]
                centroids[j, q] += eta * (mean - centroids[j, q])
            counts[j] += nb[j]
    return nb_arr
