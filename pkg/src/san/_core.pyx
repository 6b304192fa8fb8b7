# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numerical kernels.

Same contracts as ``san._fallback``; see that module for the reference
semantics.  Loops are serial so every reduction has a fixed order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


ctypedef struct RankItem:
    double dist
    unsigned long long id
    Py_ssize_t index


cdef int _cmp_rank(const void *pa, const void *pb) noexcept nogil:
    cdef const RankItem *a = <const RankItem *> pa
    cdef const RankItem *b = <const RankItem *> pb
    if a.dist < b.dist:
        return -1
    if a.dist > b.dist:
        return 1
    if a.id < b.id:
        return -1
    if a.id > b.id:
        return 1
    return 0


cdef inline double _sq_dist(const double[:, ::1] a, Py_ssize_t i,
                            const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t t
    cdef double s = 0.0, diff
    for t in range(a.shape[1]):
        diff = a[i, t] - b[j, t]
        s += diff * diff
    return s


def pairwise_sq_dists(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(m):
                ov[i, j] = _sq_dist(av, i, bv, j)
    return out


cdef void _bank(const double[:, ::1] a, const double[:, ::1] b,
                const double[::1] inv_two_sigma, const double[::1] etas,
                double[:, ::1] k, double[:, ::1] slope) noexcept nogil:
    cdef Py_ssize_t i, j, q, nk = etas.shape[0]
    cdef double d2, e, ks, ss
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            d2 = _sq_dist(a, i, b, j)
            ks = 0.0
            ss = 0.0
            for q in range(nk):
                e = etas[q] * exp(-d2 * inv_two_sigma[q])
                ks += e
                ss -= e * inv_two_sigma[q]
            k[i, j] = ks
            slope[i, j] = ss


def rbf_bank(a, b, sigmas, etas):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] inv = 1.0 / (2.0 * np.asarray(sigmas, dtype=np.float64))
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    k = np.empty((av.shape[0], bv.shape[0]), dtype=np.float64)
    slope = np.empty_like(k)
    cdef double[:, ::1] kv = k
    cdef double[:, ::1] sv = slope
    with nogil:
        _bank(av, bv, inv, ev, kv, sv)
    return k, slope


def mmd_and_grad(x, y, sigmas, etas, bint normalize=True):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] inv = 1.0 / (2.0 * np.asarray(sigmas, dtype=np.float64))
    cdef double[::1] ev = np.ascontiguousarray(etas, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = yv.shape[0], dim = xv.shape[1]
    cdef Py_ssize_t i, j, q, t, nk = ev.shape[0]
    cdef double cxx, cxy, cyy, sxx = 0.0, sxy = 0.0, syy = 0.0
    cdef double d2, e, ks, ss
    grad = np.zeros((m, dim), dtype=np.float64)
    cdef double[:, ::1] g = grad
    if normalize:
        cxx = 1.0 / (<double> n * n)
        cxy = 1.0 / (<double> n * m)
        cyy = 1.0 / (<double> m * m)
    else:
        cxx = cxy = cyy = 1.0
    with nogil:
        for i in range(n):
            for j in range(n):
                d2 = _sq_dist(xv, i, xv, j)
                for q in range(nk):
                    sxx += ev[q] * exp(-d2 * inv[q])
        for j in range(n):
            for i in range(m):
                d2 = _sq_dist(xv, j, yv, i)
                ks = 0.0
                ss = 0.0
                for q in range(nk):
                    e = ev[q] * exp(-d2 * inv[q])
                    ks += e
                    ss -= e * inv[q]
                sxy += ks
                for t in range(dim):
                    g[i, t] -= 4.0 * cxy * ss * (yv[i, t] - xv[j, t])
        for i in range(m):
            for j in range(m):
                d2 = _sq_dist(yv, i, yv, j)
                ks = 0.0
                ss = 0.0
                for q in range(nk):
                    e = ev[q] * exp(-d2 * inv[q])
                    ks += e
                    ss -= e * inv[q]
                syy += ks
                for t in range(dim):
                    g[i, t] += 4.0 * cyy * ss * (yv[i, t] - yv[j, t])
    return cxx * sxx - 2.0 * cxy * sxy + cyy * syy, grad


cdef void _sort_row(const double[::1] q, const double[:, ::1] gal,
                    const unsigned long long[::1] ids, RankItem *items) noexcept nogil:
    cdef Py_ssize_t j, t, n = gal.shape[0]
    cdef double s, diff
    for j in range(n):
        s = 0.0
        for t in range(gal.shape[1]):
            diff = gal[j, t] - q[t]
            s += diff * diff
        items[j].dist = s
        items[j].id = ids[j]
        items[j].index = j
    qsort(items, n, sizeof(RankItem), _cmp_rank)


def rank_order(dists, ids):
    cdef const double[::1] dv = np.ascontiguousarray(dists, dtype=np.float64)
    cdef const unsigned long long[::1] iv = np.ascontiguousarray(ids, dtype=np.uint64)
    cdef Py_ssize_t n = dv.shape[0], j
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] ov = out
    cdef RankItem *items = <RankItem *> malloc(max(n, 1) * sizeof(RankItem))
    if items == NULL:
        raise MemoryError()
    try:
        with nogil:
            for j in range(n):
                items[j].dist = dv[j]
                items[j].id = iv[j]
                items[j].index = j
            qsort(items, n, sizeof(RankItem), _cmp_rank)
            for j in range(n):
                ov[j] = items[j].index
    finally:
        free(items)
    return out


def topk_metrics(queries, query_labels, gallery, gallery_labels, gallery_ids,
                 Py_ssize_t k, bint ap_min_denominator=True):
    cdef const double[:, ::1] qv = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(gallery, dtype=np.float64)
    cdef const long long[::1] qlab = np.ascontiguousarray(query_labels, dtype=np.int64)
    cdef const long long[::1] glab = np.ascontiguousarray(gallery_labels, dtype=np.int64)
    cdef const unsigned long long[::1] gid = np.ascontiguousarray(gallery_ids, dtype=np.uint64)
    cdef Py_ssize_t nq = qv.shape[0], ng = gv.shape[0], i, r, j
    cdef Py_ssize_t cutoff = k if k < ng else ng
    cdef double hits, ap_sum, denom
    cdef Py_ssize_t n_rel
    precision = np.empty(nq, dtype=np.float64)
    ap = np.empty(nq, dtype=np.float64)
    cdef double[::1] pv = precision
    cdef double[::1] av = ap
    cdef RankItem *items = <RankItem *> malloc(max(ng, 1) * sizeof(RankItem))
    if items == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(nq):
                _sort_row(qv[i], gv, gid, items)
                n_rel = 0
                for j in range(ng):
                    if glab[j] == qlab[i]:
                        n_rel += 1
                hits = 0.0
                ap_sum = 0.0
                for r in range(cutoff):
                    if glab[items[r].index] == qlab[i]:
                        hits += 1.0
                        ap_sum += hits / (r + 1)
                pv[i] = hits / cutoff
                if ap_min_denominator:
                    denom = n_rel if n_rel < cutoff else cutoff
                else:
                    denom = n_rel
                av[i] = 0.0 if denom == 0 else ap_sum / denom
    finally:
        free(items)
    return precision, ap
