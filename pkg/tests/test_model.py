import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldmi.model import (
    ContrastiveUnit,
    ModelParams,
    align,
    build_batch,
    capsule_forward,
    contrastive_loss,
    forward,
    hybrid,
    load_checkpoint,
    numeric_gradient_check,
    readout_score,
    rec_loss,
    save_checkpoint,
    semantic_cluster_embed,
    squash,
    total_loss,
    zero_grads,
)


def tiny_params(N=10, d=4, K=2, seed=0, **kw):
    return ModelParams.init(N, d, np.random.default_rng(seed), K=K, **kw)


def fixed_params(E, K=1, R=1, W=None, **kw):
    E = np.asarray(E, dtype=float)
    d = E.shape[1]
    return ModelParams(E, np.eye(d) if W is None else np.asarray(W, float), np.zeros((d, d)),
                       np.zeros(d), np.zeros(1), K=K, R=R, **kw)


# -- squash -------------------------------------------------------------------

def test_squash_examples():
    assert np.all(squash(np.zeros(3)) == 0)
    m = np.array([0.6, 0.8])
    np.testing.assert_allclose(squash(m), 0.5 * m)
    assert np.linalg.norm(squash(np.array([3.0, 0.0]))) == pytest.approx(0.9)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(1.01, 10))
def test_squash_norm_below_one_and_monotone(xs, scale):
    m = np.array(xs)
    n = np.linalg.norm(m)
    if n == 0 or n > 1e4:
        return
    a = np.linalg.norm(squash(m))
    assert a < 1
    assert np.linalg.norm(squash(m * scale)) >= a


# -- routing ---------------------------------------------------------------------

def test_routing_equal_logits_give_uniform_weights():
    p = tiny_params(K=3, R=1)
    _, b = capsule_forward(p.item_embeddings[:4], p, g0=np.zeros((4, 3)))
    np.testing.assert_allclose(b, 1 / 3)


def test_routing_single_capsule():
    p = tiny_params(K=1)
    V = p.item_embeddings[:5]
    m, b = capsule_forward(V, p, g0=np.random.default_rng(3).standard_normal((5, 1)))
    assert np.all(b == 1.0)
    np.testing.assert_allclose(m[0], (V @ p.W.T).sum(axis=0))


def scripted_routing(V, W, g0, R):
    """Plain-loop trace of the routing rule, independent of the vectorized code."""
    L, K = len(g0), len(g0[0])
    d = len(V[0])
    g = [[g0[j][k] for k in range(K)] for j in range(L)]
    Wv = [[sum(W[a][c] * V[j][c] for c in range(d)) for a in range(d)] for j in range(L)]
    vW = [[sum(V[j][c] * W[c][a] for c in range(d)) for a in range(d)] for j in range(L)]
    for r in range(R):
        b = []
        for j in range(L):
            ex = [math.exp(x) for x in g[j]]
            b.append([x / sum(ex) for x in ex])
        m = [[sum(b[j][k] * Wv[j][a] for j in range(L)) for a in range(d)] for k in range(K)]
        if r == R - 1:
            return np.array(m), np.array(b)
        for k in range(K):
            n2 = sum(x * x for x in m[k])
            e = [x * n2 / (1 + n2) / math.sqrt(n2) for x in m[k]]
            for j in range(L):
                g[j][k] += sum(vW[j][a] * e[a] for a in range(d))


def test_routing_hand_trace_L2_K2_d2():
    V = np.array([[1.0, 0.5], [-0.3, 0.8]])
    g0 = np.random.default_rng(42).standard_normal((2, 2))
    p = fixed_params(V, K=2, R=3)
    m, b = capsule_forward(V, p, g0=g0)
    m_ref, b_ref = scripted_routing(V.tolist(), np.eye(2).tolist(), g0.tolist(), 3)
    np.testing.assert_allclose(m, m_ref, rtol=1e-12)
    np.testing.assert_allclose(b, b_ref, rtol=1e-12)


def test_routing_general_W_matches_trace():
    rng = np.random.default_rng(5)
    V = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 3))
    g0 = rng.standard_normal((4, 2))
    m, b = capsule_forward(V, fixed_params(V, K=2, R=4, W=W), g0=g0)
    m_ref, b_ref = scripted_routing(V.tolist(), W.tolist(), g0.tolist(), 4)
    np.testing.assert_allclose(m, m_ref, rtol=1e-10)
    np.testing.assert_allclose(b, b_ref, rtol=1e-10)


# -- semantic side ----------------------------------------------------------------

def test_cluster_embedding_examples():
    E = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    p = fixed_params(E)
    h, a = semantic_cluster_embed([2], p)
    assert a.tolist() == [1.0] and h.tolist() == [3.0, 3.0]
    h, a = semantic_cluster_embed([0, 1], p)
    np.testing.assert_allclose(a, [0.5, 0.5])
    np.testing.assert_allclose(h, [0.5, 0.5])
    p.attn_w[:] = [1.0, 0.0]
    _, a = semantic_cluster_embed([0, 1], p)
    np.testing.assert_allclose(a, [0.7311, 0.2689], atol=5e-5)
    with pytest.raises(ValueError):
        semantic_cluster_embed([], p)


def test_align_single_cluster_and_zero_projection():
    p = tiny_params(d=3)
    rng = np.random.default_rng(0)
    m = rng.standard_normal((4, 3))
    h1 = rng.standard_normal((1, 3))
    z, _ = align(m, h1, p)
    assert np.array_equal(z, np.repeat(h1, 4, axis=0))
    p.W1[:] = 0
    h = rng.standard_normal((3, 3))
    z, a = align(m, h, p)
    np.testing.assert_allclose(a, 1 / 3)
    np.testing.assert_allclose(z, np.tile(h.mean(axis=0), (4, 1)))


def test_align_hand_evaluated():
    p = fixed_params(np.zeros((1, 2)))
    p.W1[:] = [[1.0, 0.0], [0.5, -1.0]]
    m = np.array([[1.0, 2.0], [-1.0, 0.5]])
    h = np.array([[0.2, 0.4], [1.0, -0.5]])
    z, a = align(m, h, p)
    for k in range(2):
        logits = []
        for f in range(2):
            q = [math.tanh(p.W1[r][0] * h[f][0] + p.W1[r][1] * h[f][1]) for r in range(2)]
            logits.append(m[k][0] * q[0] + m[k][1] * q[1])
        ex = [math.exp(x) for x in logits]
        wts = [x / sum(ex) for x in ex]
        assert a[k].tolist() == pytest.approx(wts, rel=1e-12)
        assert z[k].tolist() == pytest.approx([wts[0] * h[0][c] + wts[1] * h[1][c] for c in range(2)], rel=1e-12)


def test_align_without_clusters_is_zero():
    z, a = align(np.ones((2, 3)), np.zeros((0, 3)), tiny_params(d=3))
    assert np.all(z == 0) and a.shape == (2, 0)


def test_hybrid_cases():
    m = np.array([[1.0, 2.0]])
    assert np.array_equal(hybrid(m, np.zeros_like(m)), m)
    assert np.array_equal(hybrid(np.zeros_like(m), m), m)
    assert np.all(hybrid(np.zeros_like(m), np.zeros_like(m)) == 0)
    with pytest.raises(ValueError):
        hybrid(m, np.zeros((2, 2)))


def test_readout_examples():
    v = np.array([1.0, 2.0])
    assert readout_score(np.array([3.0, 1.0]), v) == (5.0, 0)
    o = np.array([[2.0, 0.0], [1.0, 2.0]])
    assert readout_score(o, v) == (5.0, 1)
    assert readout_score(np.array([[1.0, 2.0], [1.0, 2.0]]), v) == (5.0, 0)


@given(st.integers(0, 1000), st.floats(-50, 50))
def test_readout_argmax_invariant_to_score_shift(seed, c):
    rng = np.random.default_rng(seed)
    o = rng.standard_normal((4, 3))
    v = rng.standard_normal(3) + 0.1
    # adding c v/|v|^2 to every interest shifts every score by c
    shifted = o + c * v / (v @ v)
    s0, k0 = readout_score(o, v)
    s1, k1 = readout_score(shifted, v)
    if np.sort(o @ v)[-1] - np.sort(o @ v)[-2] > 1e-9:
        assert k0 == k1


# -- batched forward ---------------------------------------------------------------

def test_batched_forward_matches_building_blocks():
    rng = np.random.default_rng(9)
    p = tiny_params(N=12, d=5, K=3, seed=1)
    hists = [[0, 3, 5, 7], [2, 9], [11, 4, 1]]
    clus = [[[0, 5], [3]], [[2, 9]], []]
    g0 = rng.standard_normal((3, 4, 3))
    cache = forward(p, build_batch(hists, clus, 3, None, g0=g0))
    for i, (h, cs) in enumerate(zip(hists, clus)):
        m, _ = capsule_forward(p.item_embeddings[h], p, g0=g0[i, : len(h)])
        if cs:
            H = np.stack([semantic_cluster_embed(c, p)[0] for c in cs])
            z, _ = align(m, H, p)
        else:
            z = np.zeros_like(m)
        np.testing.assert_allclose(cache.o[i], hybrid(m, z), rtol=1e-10, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = tiny_params(N=20, d=6, K=4)
    for _ in range(30):
        hists = [rng.choice(20, size=int(rng.integers(1, 9)), replace=False).tolist() for _ in range(4)]
        clus = [[h[: len(h) // 2 + 1], h[len(h) // 2 :]] for h in hists]
        c = forward(p, build_batch(hists, clus, 4, rng))
        bsum = c.b.sum(axis=2)[build_batch(hists, clus, 4, rng).mask]
        np.testing.assert_allclose(bsum, 1, atol=1e-6)
        np.testing.assert_allclose(c.beta.sum(axis=2), 1, atol=1e-6)
        np.testing.assert_allclose(c.alpha_c.sum(axis=2), 1, atol=1e-6)


def test_no_col_uses_cluster_embeddings():
    p = tiny_params(N=8, d=3, K=3, no_col=True)
    b = build_batch([[0, 1, 2, 3]], [[[0, 1], [2]]], 3, np.random.default_rng(0))
    c = forward(p, b)
    assert c.omask.tolist() == [[True, True, False]]
    np.testing.assert_allclose(c.o[0, 0], semantic_cluster_embed([0, 1], p)[0])


def test_ablation_flags_cannot_both_be_set():
    with pytest.raises(ValueError):
        tiny_params(no_sem=True, no_col=True)


# -- losses -----------------------------------------------------------------------

def one_user(E, target, negs):
    p = fixed_params(E, no_sem=True)
    batch = build_batch([[0]], [[]], 1, None, g0=np.zeros((1, 1, 1)))
    neg = None if negs is None else np.array([negs])
    return rec_loss(p, batch, np.array([target]), neg)[0]


def test_rec_loss_only_target_is_zero():
    E = [[1.0, 0.0], [2.0, 0.0]]
    assert one_user(E, 1, np.zeros(0, dtype=int).tolist()) == 0.0


def test_rec_loss_symmetric_pair_is_ln2():
    E = [[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    assert one_user(E, 1, [2]) == pytest.approx(math.log(2))


def test_rec_loss_hand_evaluated():
    E = [[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    want = -math.log(math.exp(2) / (math.exp(2) + 2))
    assert one_user(E, 1, [2, 3]) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(0.2395, abs=5e-5)
    # full softmax counts the history item too: scores 1, 2, 0, 0
    full = -math.log(math.exp(2) / (math.e + math.exp(2) + 2))
    assert one_user(E, 1, None) == pytest.approx(full, rel=1e-12)


def test_contrastive_single_cluster_is_zero():
    p = tiny_params()
    u = ContrastiveUnit.from_clusters([0, 1, 2], [[0, 1, 2]])
    assert not u.active
    assert contrastive_loss(p, [u]) == 0.0


def test_contrastive_equal_similarity_is_zero():
    E = np.tile([0.3, -0.2], (3, 1))
    u = ContrastiveUnit.from_clusters([0, 1, 2], [[0, 1], [2]])
    assert contrastive_loss(fixed_params(E), [u]) == pytest.approx(0.0, abs=1e-12)


def scripted_contrastive(E, clusters, tau):
    n = len(E)
    total = 0.0
    for j in range(n):
        cj = {f for f, c in enumerate(clusters) if j in c}
        pos = [p for p in range(n) if p != j and cj & {f for f, c in enumerate(clusters) if p in c}]
        neg = [q for q in range(n) if cj and not cj & {f for f, c in enumerate(clusters) if q in c}
               and any(q in c for c in clusters)]
        if not pos or not neg:
            continue
        dot = lambda a, b: sum(x * y for x, y in zip(E[a], E[b])) / tau
        denom = sum(math.exp(dot(j, q)) for q in neg)
        for p_ in pos:
            total += -math.log(math.exp(dot(j, p_)) / denom)
    return total


def test_contrastive_hand_evaluated():
    E = [[1.0, 0.2], [0.8, 0.1], [-0.5, 1.0], [0.1, 0.9]]
    clusters = [[0, 1], [2, 3]]
    u = ContrastiveUnit.from_clusters([0, 1, 2, 3], clusters)
    got = contrastive_loss(fixed_params(E, tau=0.1), [u])
    assert got == pytest.approx(scripted_contrastive(E, clusters, 0.1), rel=1e-12)


def test_contrastive_overlap_and_unassigned():
    # item 1 is in both clusters; item 4 is unassigned and never a negative
    E = np.random.default_rng(4).standard_normal((5, 3))
    clusters = [[0, 1], [1, 2, 3]]
    u = ContrastiveUnit.from_clusters(list(range(5)), clusters)
    assert not u.neg[0, 4] and not u.neg[1, :].any()
    got = contrastive_loss(fixed_params(E, tau=0.5), [u])
    assert got == pytest.approx(scripted_contrastive(E.tolist(), clusters, 0.5), rel=1e-12)


def test_contrastive_averages_over_units():
    E = [[1.0, 0.2], [0.8, 0.1], [-0.5, 1.0], [0.1, 0.9]]
    u = ContrastiveUnit.from_clusters([0, 1, 2, 3], [[0, 1], [2, 3]])
    idle = ContrastiveUnit.from_clusters([0, 1], [[0, 1]])
    p = fixed_params(E)
    assert contrastive_loss(p, [u, idle]) == pytest.approx(contrastive_loss(p, [u]) / 2)


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 0.0, True).total == 1.0
    assert total_loss(1.0, 2.0, 0.01, True).total == pytest.approx(1.02)
    r = total_loss(1.0, 2.0, 0.01, False)
    assert r.total == 1.0 and r.cst_loss == 2.0 and not r.cst_evaluated
    with pytest.raises(ValueError):
        total_loss(1.0, 2.0, -1.0, True)


# -- gradients ---------------------------------------------------------------------

def grad_case(no_sem=False, no_col=False, sampled=False):
    rng = np.random.default_rng(3)
    p = ModelParams.init(9, 4, rng, K=2, no_sem=no_sem, no_col=no_col, emb_std=0.7)
    batch = build_batch([[0, 1, 2, 3], [4, 5, 6]], [[[0, 1], [2, 3]], [[4], [5, 6]]], 2, rng)
    targets = np.array([7, 8])
    negs = np.array([[1, 2, 3], [0, 4, 6]]) if sampled else None
    return p, batch, targets, negs


@pytest.mark.parametrize("kw", [{}, {"sampled": True}, {"no_sem": True}, {"no_col": True}])
def test_rec_gradient(kw):
    p, batch, targets, negs = grad_case(**kw)
    # routing weights are constants of the backward pass, so hold them fixed
    routing = None if p.no_col else forward(p, batch).b
    err = numeric_gradient_check(lambda q, g: rec_loss(q, batch, targets, negs, routing, grads=g)[0], p)
    assert err < 1e-5


def test_contrastive_gradient():
    p = tiny_params(N=8, d=3, emb_std=0.5)
    units = [ContrastiveUnit.from_clusters([0, 1, 2, 3, 4], [[0, 1], [2, 3], [1, 4]]),
             ContrastiveUnit.from_clusters([5, 6, 7], [[0], [1, 2]])]
    err = numeric_gradient_check(lambda q, g: contrastive_loss(q, units, g), p)
    assert err < 1e-5


def test_stop_gradient_contract():
    p, batch, targets, _ = grad_case()
    b0 = forward(p, batch).b
    batch2 = build_batch([[0, 1, 2, 3], [4, 5, 6]], [[[0, 1], [2, 3]], [[4], [5, 6]]], 2,
                         np.random.default_rng(99))
    frozen = forward(p, batch2).b
    assert not np.allclose(b0, frozen)
    # analytic gradients equal finite differences when the routing weights are held fixed
    err = numeric_gradient_check(lambda q, g: rec_loss(q, batch2, targets, routing=frozen, grads=g)[0], p)
    assert err < 1e-5
    g_free, g_frozen = zero_grads(p), zero_grads(p)
    rec_loss(p, batch2, targets, grads=g_free)
    rec_loss(p, batch2, targets, routing=frozen, grads=g_frozen)
    for k in g_free:
        np.testing.assert_array_equal(g_free[k], g_frozen[k])


def test_without_semantics_rec_loss_ignores_semantic_params():
    p, batch, targets, _ = grad_case(no_sem=True)
    g = zero_grads(p)
    base = rec_loss(p, batch, targets, grads=g)[0]
    for name in ("W1", "attn_w", "attn_b"):
        assert np.all(g[name] == 0)
    q = p.copy()
    q.W1 += 1.0
    q.attn_w += 1.0
    q.attn_b += 1.0
    assert rec_loss(q, batch, targets)[0] == base


def test_contrastive_descent_step():
    p = tiny_params(N=6, d=3, emb_std=0.5)
    units = [ContrastiveUnit.from_clusters([0, 1, 2, 3, 4, 5], [[0, 1, 2], [3, 4], [5]])]
    g = zero_grads(p)
    before = contrastive_loss(p, units, g)
    q = p.copy()
    q.item_embeddings -= 1e-4 * g["item_embeddings"]
    assert contrastive_loss(q, units) < before


def test_gradient_check_rejects_non_finite():
    p = tiny_params()

    def bad(q, g):
        if g is not None:
            g["W"][0, 0] = np.nan
        return 0.0

    with pytest.raises(FloatingPointError):
        numeric_gradient_check(bad, p)


# -- checkpoints ------------------------------------------------------------------

@pytest.mark.parametrize("flags", [{}, {"no_sem": True}, {"no_col": True}])
def test_checkpoint_round_trip(tmp_path, flags):
    p = tiny_params(N=7, d=5, K=3, tau=0.25, **flags)
    save_checkpoint(p, tmp_path / "c.bin")
    q = load_checkpoint(tmp_path / "c.bin")
    for name, a in p.arrays().items():
        assert a.tobytes() == getattr(q, name).tobytes()
    assert (q.K, q.R, q.tau, q.no_sem, q.no_col) == (p.K, p.R, p.tau, p.no_sem, p.no_col)
    save_checkpoint(q, tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")
    p = tiny_params()
    save_checkpoint(p, tmp_path / "c.bin")
    (tmp_path / "t.bin").write_bytes((tmp_path / "c.bin").read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.bin")
