"""Pure-Python/numpy implementations of the hot kernels.

Signatures mirror ``ldmi._kernels``; see ``ldmi.kernels`` for selection.
"""

from __future__ import annotations

import heapq

import numpy as np


def dynamic_routing(U, A, mask, g0, R):
    """Batched capsule routing.

    U: (B, L, d) transformed behaviors ``W v_j``; A: (B, L, d) rows ``v_j^T W``
    used for the agreement term; mask: (B, L) valid positions; g0: (B, L, K)
    initial logits.  Returns routing weights b (B, L, K) and capsules m (B, K, d)
    built from the final routing weights.
    """
    valid = mask.astype(bool)[..., None]
    g = np.array(g0, dtype=np.float64, copy=True)
    for r in range(R):
        z = g - g.max(axis=2, keepdims=True)
        ez = np.exp(z)
        b = np.where(valid, ez / ez.sum(axis=2, keepdims=True), 0.0)
        m = np.einsum("blk,bld->bkd", b, U)
        if r == R - 1:
            break
        nrm2 = np.einsum("bkd,bkd->bk", m, m)
        safe = np.where(nrm2 > 0, nrm2, 1.0)
        coef = np.where(nrm2 > 0, nrm2 / (1.0 + nrm2) / np.sqrt(safe), 0.0)
        e = m * coef[..., None]
        g = g + np.einsum("bld,bkd->blk", A, e)
    return b, m


def lazy_greedy(indptr, indices, weights, Z):
    """Lazy greedy weighted max coverage over CSR rows.

    Ties go to the smaller row index. Stops at Z rows or zero marginal gain.
    """
    P = len(indptr) - 1
    covered = np.zeros(len(weights), dtype=bool)

    def gain(i):
        s = 0.0
        for j in indices[indptr[i] : indptr[i + 1]]:
            if not covered[j]:
                s += weights[j]
        return s

    heap = [(-gain(i), i, 0) for i in range(P)]
    heapq.heapify(heap)
    chosen = []
    rnd = 0
    while heap and len(chosen) < Z:
        neg, i, stamp = heapq.heappop(heap)
        if stamp == rnd:
            if -neg <= 0.0:
                break
            chosen.append(i)
            covered[indices[indptr[i] : indptr[i + 1]]] = True
            rnd += 1
        else:
            heapq.heappush(heap, (-gain(i), i, rnd))
    return np.asarray(chosen, dtype=np.int64)


def coverage_value(indptr, indices, weights, indicator):
    covered = np.zeros(len(weights), dtype=bool)
    for i in np.flatnonzero(indicator):
        covered[indices[indptr[i] : indptr[i + 1]]] = True
    s = 0.0
    for j in np.flatnonzero(covered):
        s += weights[j]
    return s


def topk_neighbors(user_indptr, user_items, item_indptr, item_users, G, jaccard=False):
    """For each anchor user: itself, then up to G-1 users by overlap.

    Overlap is the raw intersection size (or Jaccard); ties go to the smaller
    user index; users with zero overlap are never included. Rows are padded
    with -1.
    """
    M = len(user_indptr) - 1
    out = np.full((M, G), -1, dtype=np.int64)
    sizes = np.diff(user_indptr)
    for a in range(M):
        counts: dict[int, int] = {}
        for it in user_items[user_indptr[a] : user_indptr[a + 1]]:
            for u in item_users[item_indptr[it] : item_indptr[it + 1]]:
                if u != a:
                    counts[u] = counts.get(u, 0) + 1
        if jaccard:
            scored = [(-(c / (sizes[a] + sizes[u] - c)), u) for u, c in counts.items()]
        else:
            scored = [(-c, u) for u, c in counts.items()]
        best = heapq.nsmallest(G - 1, scored)
        out[a, 0] = a
        for pos, (_, u) in enumerate(best, 1):
            out[a, pos] = u
    return out
