# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scatter and matching kernels. Semantics mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _corners(double tx, double ty, Py_ssize_t* cx, Py_ssize_t* cy, double* k) noexcept nogil:
    cdef double fx0 = floor(tx)
    cdef double fy0 = floor(ty)
    cdef double fx = tx - fx0
    cdef double fy = ty - fy0
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0
    cdef Py_ssize_t y0 = <Py_ssize_t>fy0
    cx[0] = x0
    cy[0] = y0
    k[0] = (1.0 - fx) * (1.0 - fy)
    cx[1] = x0 + 1
    cy[1] = y0
    k[1] = fx * (1.0 - fy)
    cx[2] = x0
    cy[2] = y0 + 1
    k[2] = (1.0 - fx) * fy
    cx[3] = x0 + 1
    cy[3] = y0 + 1
    k[3] = fx * fy


def splat_sum(double[:, :, ::1] values, double[:, ::1] dx, double[:, ::1] dy, double[:, ::1] weight):
    cdef Py_ssize_t c = values.shape[0], h = values.shape[1], w = values.shape[2]
    num_arr = np.zeros((c, h, w), dtype=np.float64)
    den_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, :, ::1] num = num_arr
    cdef double[:, ::1] den = den_arr
    cdef Py_ssize_t y, x, n, ch, tx, ty
    cdef Py_ssize_t cx[4]
    cdef Py_ssize_t cy[4]
    cdef double k[4]
    cdef double wt
    with nogil:
        for y in range(h):
            for x in range(w):
                _corners(x + dx[y, x], y + dy[y, x], cx, cy, k)
                for n in range(4):
                    tx = cx[n]
                    ty = cy[n]
                    if k[n] <= 0.0 or tx < 0 or tx >= w or ty < 0 or ty >= h:
                        continue
                    wt = weight[y, x] * k[n]
                    den[ty, tx] += wt
                    for ch in range(c):
                        num[ch, ty, tx] += wt * values[ch, y, x]
    return num_arr, den_arr


def splat_max(double[:, :, ::1] values, double[:, ::1] dx, double[:, ::1] dy, double[:, ::1] weight):
    cdef Py_ssize_t c = values.shape[0], h = values.shape[1], w = values.shape[2]
    out_arr = np.zeros((c, h, w), dtype=np.float64)
    best_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] best = best_arr
    cdef Py_ssize_t y, x, n, ch, tx, ty
    cdef Py_ssize_t cx[4]
    cdef Py_ssize_t cy[4]
    cdef double k[4]
    cdef double wt
    with nogil:
        for y in range(h):
            for x in range(w):
                _corners(x + dx[y, x], y + dy[y, x], cx, cy, k)
                for n in range(4):
                    tx = cx[n]
                    ty = cy[n]
                    if k[n] <= 0.0 or tx < 0 or tx >= w or ty < 0 or ty >= h:
                        continue
                    wt = weight[y, x] * k[n]
                    # strict comparison keeps the earliest source on ties
                    if wt > best[ty, tx]:
                        best[ty, tx] = wt
                        for ch in range(c):
                            out[ch, ty, tx] = values[ch, y, x]
    return out_arr, best_arr


def cosine_argmax(double[:, ::1] src, double[:, ::1] dst, Py_ssize_t h, Py_ssize_t w, double tol):
    cdef Py_ssize_t n = src.shape[0], m = dst.shape[0], d = src.shape[1]
    best_arr = np.empty(n, dtype=np.int64)
    sim_arr = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] best = best_arr
    cdef double[::1] sim = sim_arr
    cdef Py_ssize_t i, j, k, pick, sx, sy
    cdef long long dist, best_dist
    cdef double s, top
    with nogil:
        for i in range(n):
            top = -2.0
            for j in range(m):
                s = 0.0
                for k in range(d):
                    s = s + src[i, k] * dst[j, k]
                sim[j] = s
                if s > top:
                    top = s
            sy = i // w
            sx = i - sy * w
            pick = -1
            best_dist = 0
            for j in range(m):
                if sim[j] < top - tol:
                    continue
                dist = (j % w - sx) * (j % w - sx) + (j // w - sy) * (j // w - sy)
                if pick < 0 or dist < best_dist:
                    pick = j
                    best_dist = dist
            best[i] = pick
    return best_arr
