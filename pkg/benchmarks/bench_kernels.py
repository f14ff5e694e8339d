"""Time the compiled kernels against the numpy/pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]
"""

import argparse
import timeit

import numpy as np

from ldmi import kernels


def routing_case(rng, scale):
    B, L, K, d = int(128 * scale) or 1, 20, 4, 64
    U = rng.standard_normal((B, L, d))
    A = rng.standard_normal((B, L, d))
    mask = np.ones((B, L), dtype=np.uint8)
    g0 = rng.standard_normal((B, L, K))
    return lambda mod: mod.dynamic_routing(U, A, mask, g0, 3)


def csr(groups):
    indptr = np.concatenate([[0], np.cumsum([len(g) for g in groups])]).astype(np.int64)
    return indptr, np.concatenate(groups).astype(np.int64)


def coverage_case(rng, scale):
    P, Q = int(5000 * scale) or 1, int(2000 * scale) or 1
    rows = [np.unique(rng.integers(0, Q, size=int(rng.integers(5, 40)))) for _ in range(P)]
    indptr, indices = csr(rows)
    w = 1.0 + rng.random(Q)
    Z = max(1, P // 20)
    x = (rng.random(P) < 0.05).astype(np.uint8)
    return (lambda mod: mod.lazy_greedy(indptr, indices, w, Z),
            lambda mod: mod.coverage_value(indptr, indices, w, x))


def neighbor_case(rng, scale):
    M, N = int(3000 * scale) or 1, int(1500 * scale) or 1
    users = [np.unique(rng.integers(0, N, size=int(rng.integers(5, 20)))) for _ in range(M)]
    item_users = [[] for _ in range(N)]
    for u, items in enumerate(users):
        for i in items:
            item_users[i].append(u)
    uptr, uitems = csr(users)
    iptr, iusers = csr([np.asarray(x, dtype=np.int64) for x in item_users])
    return lambda mod: mod.topk_neighbors(uptr, uitems, iptr, iusers, 5, False)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    args = ap.parse_args()
    backends = kernels.backends()
    rng = np.random.default_rng(0)
    greedy, cover = coverage_case(rng, args.scale)
    cases = {
        "dynamic_routing": routing_case(rng, args.scale),
        "lazy_greedy": greedy,
        "coverage_value": cover,
        "topk_neighbors": neighbor_case(rng, args.scale),
    }
    names = sorted(backends)
    print(f"{'kernel':<18}" + "".join(f"{n + ' (ms)':>16}" for n in names) + f"{'speedup':>10}")
    for kname, fn in cases.items():
        best = {}
        for n in names:
            mod = backends[n]
            best[n] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        speed = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{kname:<18}" + "".join(f"{best[n]:>16.2f}" for n in names) + f"{speed:>9.1f}x")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
