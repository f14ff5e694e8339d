import numpy as np
import pytest

from ldmi import _fallback, kernels

BACKENDS = kernels.backends()


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
class TestEquivalence:
    cy = BACKENDS.get("cython")

    def test_routing(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            B, L, K, d = (int(x) for x in rng.integers(1, 7, size=4))
            U = rng.standard_normal((B, L, d))
            A = rng.standard_normal((B, L, d))
            mask = (rng.random((B, L)) < 0.8).astype(np.uint8)
            g0 = rng.standard_normal((B, L, K))
            R = int(rng.integers(1, 5))
            b1, m1 = _fallback.dynamic_routing(U, A, mask, g0, R)
            b2, m2 = self.cy.dynamic_routing(U, A, mask, g0, R)
            np.testing.assert_allclose(b2, b1, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(m2, m1, rtol=1e-12, atol=1e-14)

    def test_greedy_and_coverage(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            P, Q = int(rng.integers(1, 25)), int(rng.integers(1, 30))
            rows = [np.sort(rng.choice(Q, size=int(rng.integers(0, Q + 1)), replace=False)) for _ in range(P)]
            indptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])]).astype(np.int64)
            indices = np.concatenate(rows).astype(np.int64) if P else np.zeros(0, np.int64)
            w = rng.choice([1.0, 1.5, rng.uniform(1, 2)], size=Q)
            Z = int(rng.integers(1, P + 2))
            a = _fallback.lazy_greedy(indptr, indices, w, Z)
            b = self.cy.lazy_greedy(indptr, indices, w, Z)
            assert a.tolist() == b.tolist()
            x = (rng.random(P) < 0.5).astype(np.uint8)
            assert _fallback.coverage_value(indptr, indices, w, x) == self.cy.coverage_value(indptr, indices, w, x)

    def test_neighbors(self):
        rng = np.random.default_rng(2)
        M, N = 60, 25
        users = [np.unique(rng.choice(N, size=int(rng.integers(1, 8)))) for _ in range(M)]
        items = [[u for u in range(M) if i in users[u]] for i in range(N)]
        uptr = np.concatenate([[0], np.cumsum([len(x) for x in users])]).astype(np.int64)
        iptr = np.concatenate([[0], np.cumsum([len(x) for x in items])]).astype(np.int64)
        uitems = np.concatenate(users).astype(np.int64)
        iusers = np.concatenate([np.asarray(x, dtype=np.int64) for x in items])
        for G in (1, 3, 6):
            for jac in (False, True):
                a = _fallback.topk_neighbors(uptr, uitems, iptr, iusers, G, jac)
                b = self.cy.topk_neighbors(uptr, uitems, iptr, iusers, G, jac)
                assert np.array_equal(a, b)
