# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of :mod:`loocite._ext.pure`; same signatures and results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


def cd_lasso(X, y, double lam, int max_sweeps=10000, double tol=1e-8):
    cdef double[::1, :] Xv = np.asfortranarray(X, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1], i, j
    w_arr = np.zeros(d)
    r_arr = np.array(yv, copy=True)
    sq_arr = np.zeros(d)
    hist_arr = np.zeros(max_sweeps)
    cdef double[::1] w = w_arr, r = r_arr, col_sq = sq_arr, hist = hist_arr
    cdef double acc, rho, old, new, delta, max_dw, max_w, rr, l1
    cdef int sweep = 0, done = 0

    for j in range(d):
        acc = 0.0
        for i in range(n):
            acc += Xv[i, j] * Xv[i, j]
        col_sq[j] = acc / n

    while sweep < max_sweeps and not done:
        max_dw = 0.0
        max_w = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            acc = 0.0
            for i in range(n):
                acc += Xv[i, j] * r[i]
            old = w[j]
            rho = acc / n + col_sq[j] * old
            if rho > lam:
                new = (rho - lam) / col_sq[j]
            elif rho < -lam:
                new = (rho + lam) / col_sq[j]
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for i in range(n):
                    r[i] -= Xv[i, j] * delta
                w[j] = new
            if fabs(new - old) > max_dw:
                max_dw = fabs(new - old)
            if fabs(new) > max_w:
                max_w = fabs(new)
        rr = 0.0
        for i in range(n):
            rr += r[i] * r[i]
        l1 = 0.0
        for j in range(d):
            l1 += fabs(w[j])
        hist[sweep] = rr / (2 * n) + lam * l1
        sweep += 1
        if max_dw <= tol * max_w or max_dw == 0.0:
            done = 1
    return w_arr, sweep, hist_arr[:sweep].copy()


def grubbs_sequence(values, int k):
    cdef double[::1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], i, best
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] alive = alive_arr
    cdef double mean, ss, hi, lo, s
    cdef Py_ssize_t m
    idx, stat, size = [], [], []
    for _ in range(k):
        m = 0
        mean = 0.0
        best = -1
        for i in range(n):
            if alive[i]:
                if best < 0 or x[i] > hi:
                    hi = x[i]
                    best = i
                if m == 0 or x[i] < lo:
                    lo = x[i]
                m += 1
                mean += x[i]
        if m < 3 or hi == lo:
            break
        mean /= m
        ss = 0.0
        for i in range(n):
            if alive[i]:
                ss += (x[i] - mean) * (x[i] - mean)
        s = sqrt(ss / (m - 1))
        idx.append(best)
        stat.append((x[best] - mean) / s)
        size.append(m)
        alive[best] = 0
    return (np.asarray(idx, dtype=np.int64), np.asarray(stat, dtype=np.float64),
            np.asarray(size, dtype=np.int64))
