# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Pure-Python twins live in ``ldmi._fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()


def dynamic_routing(const double[:, :, ::1] U, const double[:, :, ::1] A,
                    const cnp.uint8_t[:, ::1] mask, const double[:, :, ::1] g0, int R):
    cdef Py_ssize_t B = U.shape[0], L = U.shape[1], d = U.shape[2], K = g0.shape[2]
    b_arr = np.zeros((B, L, K), dtype=np.float64)
    m_arr = np.zeros((B, K, d), dtype=np.float64)
    cdef double[:, :, ::1] b = b_arr
    cdef double[:, :, ::1] m = m_arr
    cdef double[:, ::1] g = np.empty((L, K), dtype=np.float64)
    cdef double[:, ::1] e = np.empty((K, d), dtype=np.float64)
    cdef Py_ssize_t bi, j, k, t
    cdef int r
    cdef double mx, s, nrm2, coef, acc
    with nogil:
        for bi in range(B):
            for j in range(L):
                for k in range(K):
                    g[j, k] = g0[bi, j, k]
            for r in range(R):
                for j in range(L):
                    if not mask[bi, j]:
                        for k in range(K):
                            b[bi, j, k] = 0.0
                        continue
                    mx = g[j, 0]
                    for k in range(1, K):
                        if g[j, k] > mx:
                            mx = g[j, k]
                    s = 0.0
                    for k in range(K):
                        b[bi, j, k] = exp(g[j, k] - mx)
                        s += b[bi, j, k]
                    for k in range(K):
                        b[bi, j, k] /= s
                for k in range(K):
                    for t in range(d):
                        m[bi, k, t] = 0.0
                    for j in range(L):
                        if mask[bi, j]:
                            for t in range(d):
                                m[bi, k, t] += b[bi, j, k] * U[bi, j, t]
                if r == R - 1:
                    break
                for k in range(K):
                    nrm2 = 0.0
                    for t in range(d):
                        nrm2 += m[bi, k, t] * m[bi, k, t]
                    coef = 0.0
                    if nrm2 > 0:
                        coef = nrm2 / (1.0 + nrm2) / sqrt(nrm2)
                    for t in range(d):
                        e[k, t] = coef * m[bi, k, t]
                for j in range(L):
                    if not mask[bi, j]:
                        continue
                    for k in range(K):
                        acc = 0.0
                        for t in range(d):
                            acc += A[bi, j, t] * e[k, t]
                        g[j, k] += acc
    return b_arr, m_arr


cdef inline double _gain(Py_ssize_t i, const long[::1] indptr, const long[::1] indices,
                         const double[::1] weights, cnp.uint8_t[::1] covered) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t p
    for p in range(indptr[i], indptr[i + 1]):
        if not covered[indices[p]]:
            s += weights[indices[p]]
    return s


cdef inline bint _before(double ga, long ia, double gb, long ib) noexcept nogil:
    # max-heap order: larger gain first, then smaller index
    return ga > gb or (ga == gb and ia < ib)


def lazy_greedy(indptr_in, indices_in, weights_in, long Z):
    cdef const long[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef const long[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int64)
    cdef const double[::1] weights = np.ascontiguousarray(weights_in, dtype=np.float64)
    cdef Py_ssize_t P = indptr.shape[0] - 1
    cdef cnp.uint8_t[::1] covered = np.zeros(weights.shape[0], dtype=np.uint8)
    # binary heap of (gain, row, stamp)
    cdef double[::1] hg = np.empty(P, dtype=np.float64)
    cdef long[::1] hi = np.empty(P, dtype=np.int64)
    cdef long[::1] hs = np.zeros(P, dtype=np.int64)
    chosen_arr = np.empty(min(Z, P) if Z > 0 else 0, dtype=np.int64)
    cdef long[::1] chosen = chosen_arr
    cdef Py_ssize_t n = P, nch = 0, i, c, par, p, child
    cdef long rnd = 0, row, stamp
    cdef double gain, tg
    cdef long ti, ts
    with nogil:
        for i in range(P):
            hg[i] = _gain(i, indptr, indices, weights, covered)
            hi[i] = i
        # heapify
        i = n // 2 - 1
        while i >= 0:
            c = i
            while True:
                child = 2 * c + 1
                if child >= n:
                    break
                if child + 1 < n and _before(hg[child + 1], hi[child + 1], hg[child], hi[child]):
                    child += 1
                if _before(hg[child], hi[child], hg[c], hi[c]):
                    tg = hg[c]; ti = hi[c]; ts = hs[c]
                    hg[c] = hg[child]; hi[c] = hi[child]; hs[c] = hs[child]
                    hg[child] = tg; hi[child] = ti; hs[child] = ts
                    c = child
                else:
                    break
            i -= 1
        while n > 0 and nch < Z:
            gain = hg[0]; row = hi[0]; stamp = hs[0]
            if stamp == rnd:
                if gain <= 0.0:
                    break
                chosen[nch] = row
                nch += 1
                for p in range(indptr[row], indptr[row + 1]):
                    covered[indices[p]] = 1
                rnd += 1
                # pop root
                n -= 1
                hg[0] = hg[n]; hi[0] = hi[n]; hs[0] = hs[n]
            else:
                hg[0] = _gain(row, indptr, indices, weights, covered)
                hs[0] = rnd
            # sift root down
            c = 0
            while True:
                child = 2 * c + 1
                if child >= n:
                    break
                if child + 1 < n and _before(hg[child + 1], hi[child + 1], hg[child], hi[child]):
                    child += 1
                if _before(hg[child], hi[child], hg[c], hi[c]):
                    tg = hg[c]; ti = hi[c]; ts = hs[c]
                    hg[c] = hg[child]; hi[c] = hi[child]; hs[c] = hs[child]
                    hg[child] = tg; hi[child] = ti; hs[child] = ts
                    c = child
                else:
                    break
    return chosen_arr[:nch].copy()


def coverage_value(indptr_in, indices_in, weights_in, indicator_in):
    cdef const long[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef const long[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int64)
    cdef const double[::1] weights = np.ascontiguousarray(weights_in, dtype=np.float64)
    cdef const cnp.uint8_t[::1] x = np.ascontiguousarray(indicator_in, dtype=np.uint8)
    cdef cnp.uint8_t[::1] covered = np.zeros(weights.shape[0], dtype=np.uint8)
    cdef Py_ssize_t i, p, j
    cdef double s = 0.0
    with nogil:
        for i in range(indptr.shape[0] - 1):
            if x[i]:
                for p in range(indptr[i], indptr[i + 1]):
                    covered[indices[p]] = 1
        for j in range(weights.shape[0]):
            if covered[j]:
                s += weights[j]
    return s


def topk_neighbors(user_indptr_in, user_items_in, item_indptr_in, item_users_in, long G, bint jaccard=False):
    cdef const long[::1] uptr = np.ascontiguousarray(user_indptr_in, dtype=np.int64)
    cdef const long[::1] uitems = np.ascontiguousarray(user_items_in, dtype=np.int64)
    cdef const long[::1] iptr = np.ascontiguousarray(item_indptr_in, dtype=np.int64)
    cdef const long[::1] iusers = np.ascontiguousarray(item_users_in, dtype=np.int64)
    cdef Py_ssize_t M = uptr.shape[0] - 1
    out_arr = np.full((M, G), -1, dtype=np.int64)
    cdef long[:, ::1] out = out_arr
    cdef long[::1] counts = np.zeros(M, dtype=np.int64)
    cdef long[::1] touched = np.empty(M, dtype=np.int64)
    cdef double[::1] best_s = np.empty(max(G - 1, 1), dtype=np.float64)
    cdef long[::1] best_u = np.empty(max(G - 1, 1), dtype=np.int64)
    cdef Py_ssize_t a, p, q, t, nt, nb, pos
    cdef long u, it, cnt
    cdef double score
    with nogil:
        for a in range(M):
            nt = 0
            for p in range(uptr[a], uptr[a + 1]):
                it = uitems[p]
                for q in range(iptr[it], iptr[it + 1]):
                    u = iusers[q]
                    if u == a:
                        continue
                    if counts[u] == 0:
                        touched[nt] = u
                        nt += 1
                    counts[u] += 1
            nb = 0
            for t in range(nt):
                u = touched[t]
                cnt = counts[u]
                counts[u] = 0
                if jaccard:
                    score = <double>cnt / <double>((uptr[a + 1] - uptr[a]) + (uptr[u + 1] - uptr[u]) - cnt)
                else:
                    score = <double>cnt
                # insertion into a sorted buffer of at most G-1 entries
                pos = nb
                while pos > 0 and (score > best_s[pos - 1] or (score == best_s[pos - 1] and u < best_u[pos - 1])):
                    pos -= 1
                if pos >= G - 1:
                    continue
                if nb < G - 1:
                    nb += 1
                q = nb - 1
                while q > pos:
                    best_s[q] = best_s[q - 1]
                    best_u[q] = best_u[q - 1]
                    q -= 1
                best_s[pos] = score
                best_u[pos] = u
            out[a, 0] = a
            for t in range(nb):
                out[a, t + 1] = best_u[t]
    return out_arr
