# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "cython"


def _candidates(vs, m, upper):
    pts = np.concatenate(([0.0, upper, m], vs))
    pts = pts[(pts >= 0.0) & (pts <= upper)]
    return np.unique(pts)


def tv_dual_rows(p0, v, double rho, double m, double upper, int threads=1):
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    order_arr = np.argsort(v, kind="stable").astype(np.int64)
    vs_arr = v[order_arr]
    cand_arr = _candidates(vs_arr, m, upper)
    idx_arr = np.searchsorted(vs_arr, cand_arr, side="left").astype(np.int64)

    cdef const double[:, ::1] P = p0
    cdef const double[::1] vs = vs_arr
    cdef const long long[::1] order = order_arr
    cdef const double[::1] cand = cand_arr
    cdef const long long[::1] idx = idx_arr
    cdef Py_ssize_t n_rows = P.shape[0]
    cdef Py_ssize_t n_cand = cand.shape[0]
    out_h_arr = np.empty(n_rows)
    out_eta_arr = np.empty(n_rows)
    cdef double[::1] out_h = out_h_arr
    cdef double[::1] out_eta = out_eta_arr
    cdef Py_ssize_t r, k, j
    cdef double cp, cpv, p, h, best, best_eta, c, hm
    if threads < 1:
        threads = 1

    for r in prange(n_rows, nogil=True, num_threads=threads, schedule="static"):
        cp = 0.0
        cpv = 0.0
        j = 0
        best = 0.0
        best_eta = 0.0
        for k in range(n_cand):
            while j < idx[k]:
                p = P[r, order[j]]
                cp = cp + p
                cpv = cpv + p * vs[j]
                j = j + 1
            c = cand[k]
            hm = c - m
            if hm < 0.0:
                hm = 0.0
            h = c * cp - cpv - c + rho * hm
            if k == 0 or h < best:
                best = h
                best_eta = c
        out_h[r] = best
        out_eta[r] = best_eta
    return out_h_arr, out_eta_arr


def group_hinge_argmin(starts, y, w, double level, double upper):
    cdef const long long[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef const double[::1] ys = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] ws = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n_groups = st.shape[0] - 1
    g_arr = np.zeros(n_groups)
    val_arr = np.zeros(n_groups)
    cdef double[::1] g_out = g_arr
    cdef double[::1] val_out = val_arr
    cdef Py_ssize_t grp, i, lo, hi
    cdef double total, cw, cwy, c, h, best, best_g, prev

    for grp in range(n_groups):
        lo = st[grp]
        hi = st[grp + 1]
        total = 0.0
        for i in range(lo, hi):
            total = total + ws[i]
        # candidates: 0, in-range atoms (ascending, deduplicated), upper
        cw = 0.0
        cwy = 0.0
        i = lo
        while i < hi and ys[i] < 0.0:
            cw = cw + ws[i]
            cwy = cwy + ws[i] * ys[i]
            i = i + 1
        best = 0.0 * cw - cwy - level * total * 0.0
        best_g = 0.0
        prev = 0.0
        while i < hi and ys[i] <= upper:
            c = ys[i]
            if c > prev:
                h = c * cw - cwy - level * total * c
                if h < best:
                    best = h
                    best_g = c
                prev = c
            while i < hi and ys[i] == c:
                cw = cw + ws[i]
                cwy = cwy + ws[i] * ys[i]
                i = i + 1
        if upper > prev:
            h = upper * cw - cwy - level * total * upper
            if h < best:
                best = h
                best_g = upper
        g_out[grp] = best_g
        val_out[grp] = best
    return g_arr, val_arr


def hinge_loss_grad(cell, y, w, g_cell, double level):
    cdef const long long[::1] cl = np.ascontiguousarray(cell, dtype=np.int64)
    cdef const double[::1] ys = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] ws = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] gc = np.ascontiguousarray(g_cell, dtype=np.float64)
    grad_arr = np.zeros(gc.shape[0])
    cdef double[::1] grad = grad_arr
    cdef Py_ssize_t i
    cdef double loss = 0.0, g, d, act
    for i in range(ys.shape[0]):
        g = gc[cl[i]]
        d = g - ys[i]
        act = 1.0 if d > 0.0 else 0.0
        loss = loss + ws[i] * (act * d - level * g)
        grad[cl[i]] = grad[cl[i]] + ws[i] * (act - level)
    return loss, grad_arr
