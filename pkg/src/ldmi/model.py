"""Differentiable math of the dual-level multi-interest model, in numpy.

Gradients are written out by hand.  Capsule routing weights are treated as
constants in the backward pass: gradients reach the item table and ``W`` only
through the final ``m_k = sum_j b_jk W v_j``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels

PARAM_NAMES = ("item_embeddings", "W", "W1", "attn_w", "attn_b")
CHECKPOINT_MAGIC = b"LDMICKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    item_embeddings: np.ndarray  # (N, d)
    W: np.ndarray  # (d, d) capsule transform
    W1: np.ndarray  # (d, d) alignment projection
    attn_w: np.ndarray  # (d,) within-cluster attention
    attn_b: np.ndarray  # (1,)
    K: int = 4
    R: int = 3
    tau: float = 0.1
    no_sem: bool = False
    no_col: bool = False

    def __post_init__(self):
        if self.K < 1 or self.R < 1 or self.tau <= 0:
            raise ValueError("need K >= 1, R >= 1, tau > 0")
        if self.no_sem and self.no_col:
            raise ValueError("no_sem and no_col together leave no interest representation")

    @property
    def d(self) -> int:
        return self.item_embeddings.shape[1]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for n in PARAM_NAMES:
            kw[n] = kw[n].copy()
        return ModelParams(**kw)

    @classmethod
    def init(cls, n_items: int, d: int, rng: np.random.Generator, K: int = 4, R: int = 3,
             tau: float = 0.1, no_sem: bool = False, no_col: bool = False, emb_std: float | None = None):
        emb_std = emb_std if emb_std is not None else d ** -0.5
        lim = np.sqrt(6.0 / (2 * d))
        return cls(
            item_embeddings=rng.normal(0.0, emb_std, size=(n_items, d)),
            W=np.eye(d) + rng.uniform(-lim, lim, size=(d, d)) * 0.1,
            W1=rng.uniform(-lim, lim, size=(d, d)),
            attn_w=rng.normal(0.0, 0.01, size=d),
            attn_b=np.zeros(1),
            K=K, R=R, tau=tau, no_sem=no_sem, no_col=no_col,
        )


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.arrays().items()}


# -- single-vector building blocks ------------------------------------------

def squash(m: np.ndarray) -> np.ndarray:
    """Scale ``m`` to norm |m|^2/(1+|m|^2), same direction; zero maps to zero."""
    m = np.asarray(m, dtype=np.float64)
    nrm2 = np.sum(m * m, axis=-1, keepdims=True)
    safe = np.where(nrm2 > 0, nrm2, 1.0)
    return np.where(nrm2 > 0, m * (nrm2 / (1.0 + nrm2) / np.sqrt(safe)), 0.0)


def _softmax(x: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ez = np.exp(x - mx)
    if mask is not None:
        ez = np.where(mask, ez, 0.0)
    s = ez.sum(axis=axis, keepdims=True)
    return np.divide(ez, s, out=np.zeros_like(ez), where=s > 0)


def capsule_forward(item_embeds: np.ndarray, params: ModelParams, K: int | None = None,
                    R: int | None = None, g0: np.ndarray | None = None,
                    rng: np.random.Generator | None = None):
    """Capsule interests of one behavior sequence. Returns (m: K x d, b: L x K)."""
    V = np.asarray(item_embeds, dtype=np.float64)
    K = params.K if K is None else K
    R = params.R if R is None else R
    if g0 is None:
        g0 = (rng or np.random.default_rng(0)).standard_normal((V.shape[0], K))
    U = V @ params.W.T
    A = V @ params.W
    mask = np.ones((1, V.shape[0]), dtype=np.uint8)
    b, m = kernels.dynamic_routing(U[None].copy(), A[None].copy(), mask, np.ascontiguousarray(g0[None]), R)
    return m[0], b[0]


def semantic_cluster_embed(cluster: Sequence[int], params: ModelParams):
    """Attention-pooled embedding of one cluster of item indices. Returns (h, alpha)."""
    if len(cluster) == 0:
        raise ValueError("empty cluster")
    Vc = params.item_embeddings[np.asarray(cluster)]
    alpha = _softmax(Vc @ params.attn_w + params.attn_b[0])
    return alpha @ Vc, alpha


def align(m: np.ndarray, h: np.ndarray, params: ModelParams):
    """Attend from each collaborative interest onto the semantic clusters. Returns (z, alpha)."""
    m = np.atleast_2d(m)
    if h.shape[0] == 0:
        return np.zeros_like(m), np.zeros((m.shape[0], 0))
    P = np.tanh(h @ params.W1.T)
    alpha = _softmax(m @ P.T, axis=1)
    return alpha @ h, alpha


def hybrid(m: np.ndarray, z: np.ndarray) -> np.ndarray:
    if m.shape != z.shape:
        raise ValueError("shape mismatch")
    return m + z


def readout_score(o: np.ndarray, v: np.ndarray):
    """Max over interests of o_k . v; ties go to the smallest k."""
    s = np.atleast_2d(o) @ v
    k = int(np.argmax(s))
    return float(s[k]), k


# -- batched model -----------------------------------------------------------

@dataclass
class Batch:
    """Padded inputs for B users.

    ``seq``/``mask``: (B, L) histories. ``clusters``/``cmask``: (B, F, C) item
    indices of each semantic cluster, ``fmask``: (B, F) existing clusters.
    ``g0``: (B, L, K) initial routing logits.
    """

    seq: np.ndarray
    mask: np.ndarray
    clusters: np.ndarray
    cmask: np.ndarray
    fmask: np.ndarray
    g0: np.ndarray

    @property
    def size(self) -> int:
        return self.seq.shape[0]


def build_batch(histories: Sequence[Sequence[int]], clusters: Sequence[Sequence[Sequence[int]]],
                K: int, rng: np.random.Generator, g0: np.ndarray | None = None) -> Batch:
    B = len(histories)
    L = max(1, max((len(h) for h in histories), default=1))
    F = max(1, max((len(c) for c in clusters), default=1))
    C = max(1, max((len(m) for c in clusters for m in c), default=1))
    seq = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    cl = np.zeros((B, F, C), dtype=np.int64)
    cmask = np.zeros((B, F, C), dtype=bool)
    fmask = np.zeros((B, F), dtype=bool)
    for i, (h, cs) in enumerate(zip(histories, clusters)):
        seq[i, : len(h)] = h
        mask[i, : len(h)] = True
        for f, members in enumerate(cs):
            cl[i, f, : len(members)] = members
            cmask[i, f, : len(members)] = True
            fmask[i, f] = len(members) > 0
    if g0 is None:
        g0 = rng.standard_normal((B, L, K))
    return Batch(seq, mask, cl, cmask, fmask, np.ascontiguousarray(g0, dtype=np.float64))


@dataclass
class ForwardCache:
    o: np.ndarray  # (B, K, d) hybrid interests
    omask: np.ndarray  # (B, K) usable interests
    V: np.ndarray | None = None
    b: np.ndarray | None = None
    m: np.ndarray | None = None
    Vc: np.ndarray | None = None
    alpha_c: np.ndarray | None = None
    h: np.ndarray | None = None
    P: np.ndarray | None = None
    beta: np.ndarray | None = None
    z: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def forward(params: ModelParams, batch: Batch, routing: np.ndarray | None = None) -> ForwardCache:
    """Hybrid interests for a batch. ``routing`` (B, L, K) freezes the routing weights."""
    E = params.item_embeddings
    B = batch.size
    K, d = params.K, params.d
    cache = ForwardCache(o=np.zeros((B, K, d)), omask=np.ones((B, K), dtype=bool))
    use_sem = not params.no_sem
    if use_sem:
        Vc = E[batch.clusters] * batch.cmask[..., None]
        s = Vc @ params.attn_w + params.attn_b[0]
        alpha = _softmax(s, batch.cmask, axis=2)
        h = (alpha[:, :, None, :] @ Vc)[:, :, 0, :]
        cache.Vc, cache.alpha_c, cache.h = Vc, alpha, h
    if params.no_col:
        F = cache.h.shape[1]
        k = min(K, F)
        cache.o[:, :k] = cache.h[:, :k]
        cache.omask[:] = False
        cache.omask[:, :k] = batch.fmask[:, :k]
        return cache
    V = E[batch.seq] * batch.mask[..., None]
    U = V @ params.W.T
    if routing is None:
        A = V @ params.W
        routing, _ = kernels.dynamic_routing(
            np.ascontiguousarray(U), np.ascontiguousarray(A),
            np.ascontiguousarray(batch.mask, dtype=np.uint8), batch.g0, params.R,
        )
    m = routing.transpose(0, 2, 1) @ U
    cache.V, cache.b, cache.m = V, routing, m
    if use_sem:
        P = np.tanh(cache.h @ params.W1.T)
        logits = m @ P.transpose(0, 2, 1)
        beta = _softmax(logits, batch.fmask[:, None, :], axis=2)
        z = beta @ cache.h
        cache.P, cache.beta, cache.z = P, beta, z
        cache.o = m + z
    else:
        cache.o = m.copy()
    return cache


def backward(params: ModelParams, batch: Batch, cache: ForwardCache, do: np.ndarray,
             grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients given dLoss/do (B, K, d)."""
    gE = grads["item_embeddings"]
    dh = None
    if cache.h is not None:
        dh = np.zeros_like(cache.h)
    if params.no_col:
        k = min(params.K, dh.shape[1])
        dh[:, :k] += do[:, :k] * cache.omask[:, :k, None]
    else:
        dm = do.copy()
        if cache.z is not None:
            beta, h, P, m = cache.beta, cache.h, cache.P, cache.m
            dbeta = do @ h.transpose(0, 2, 1)
            dh += beta.transpose(0, 2, 1) @ do
            dlog = beta * (dbeta - np.sum(beta * dbeta, axis=2, keepdims=True))
            dm += dlog @ P
            dP = dlog.transpose(0, 2, 1) @ m
            dQ = dP * (1.0 - P * P)
            grads["W1"] += dQ.reshape(-1, dQ.shape[-1]).T @ h.reshape(-1, h.shape[-1])
            dh += dQ @ params.W1
        dU = cache.b @ dm
        grads["W"] += dU.reshape(-1, dU.shape[-1]).T @ cache.V.reshape(-1, dU.shape[-1])
        dV = dU @ params.W
        np.add.at(gE, batch.seq[batch.mask], dV[batch.mask])
    if dh is not None:
        alpha, Vc = cache.alpha_c, cache.Vc
        dalpha = (Vc @ dh[..., None])[..., 0]
        dVc = alpha[..., None] * dh[:, :, None, :]
        ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=2, keepdims=True))
        dVc += ds[..., None] * params.attn_w
        grads["attn_w"] += ds.reshape(-1) @ Vc.reshape(-1, Vc.shape[-1])
        grads["attn_b"] += ds.sum()
        np.add.at(gE, batch.clusters[batch.cmask], dVc[batch.cmask])


def _interest_scores(cache: ForwardCache, E_c: np.ndarray, shared: bool):
    if shared:
        B, K, d = cache.o.shape
        s = (cache.o.reshape(B * K, d) @ E_c.T).reshape(B, K, -1)
    else:
        s = cache.o @ E_c.transpose(0, 2, 1)
    s = np.where(cache.omask[..., None], s, -np.inf)
    kstar = np.argmax(s, axis=1)
    f = np.take_along_axis(s, kstar[:, None, :], axis=1)[:, 0, :]
    # users with no usable interest score 0 everywhere
    f = np.where(np.isfinite(f), f, 0.0)
    return f, kstar


def score_all(params: ModelParams, cache: ForwardCache) -> np.ndarray:
    """Readout scores (B, N) of every item."""
    return _interest_scores(cache, params.item_embeddings, shared=True)[0]


def sample_negatives(targets: np.ndarray, n_items: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """S uniform negatives per target, never equal to the target."""
    r = rng.integers(0, n_items - 1, size=(len(targets), S))
    return r + (r >= np.asarray(targets)[:, None])


def rec_loss(params: ModelParams, batch: Batch, targets: np.ndarray, negatives: np.ndarray | None = None,
             routing: np.ndarray | None = None, grads: dict | None = None, scale: float = 1.0):
    """Mean InfoNCE next-item loss with hard-max readout.

    ``negatives=None`` uses every item as a candidate (full softmax);
    otherwise candidates are the target plus the given negatives per row.
    Gradients (times ``scale``) are added into ``grads`` when given.
    """
    E = params.item_embeddings
    cache = forward(params, batch, routing)
    B = batch.size
    targets = np.asarray(targets)
    if negatives is None:
        f, kstar = _interest_scores(cache, E, shared=True)
        tcol = targets
    else:
        negatives = np.asarray(negatives, dtype=np.int64).reshape(B, -1)
        cand = np.concatenate([targets[:, None], negatives], axis=1)
        E_c = E[cand]
        f, kstar = _interest_scores(cache, E_c, shared=False)
        tcol = np.zeros(B, dtype=np.int64)
    mx = f.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(f - mx).sum(axis=1))
    loss = float(np.mean(lse - f[np.arange(B), tcol]))
    if grads is None:
        return loss, cache
    df = np.exp(f - lse[:, None])
    df[np.arange(B), tcol] -= 1.0
    df *= scale / B
    df[~cache.omask.any(axis=1)] = 0.0
    do = np.zeros_like(cache.o)
    gE = grads["item_embeddings"]
    for k in range(params.K):
        sel = np.where(kstar == k, df, 0.0)
        if not cache.omask[:, k].any():
            continue
        if negatives is None:
            do[:, k] = sel @ E
            gE += sel.T @ cache.o[:, k]
        else:
            do[:, k] = (sel[:, None, :] @ E_c)[:, 0, :]
            np.add.at(gE, cand.ravel(), (sel[..., None] * cache.o[:, k, None, :]).reshape(-1, params.d))
    backward(params, batch, cache, do, grads)
    return loss, cache


# -- crowd-level contrastive loss -------------------------------------------

@dataclass
class ContrastiveUnit:
    """One synthesized user: its distinct items and cluster-sharing masks."""

    items: np.ndarray  # (n,)
    pos: np.ndarray  # (n, n) share a cluster, j != p
    neg: np.ndarray  # (n, n) share no cluster

    @classmethod
    def from_clusters(cls, items: Sequence[int], clusters: Sequence[Sequence[int]]) -> "ContrastiveUnit":
        n = len(items)
        member = np.zeros((n, max(len(clusters), 1)), dtype=bool)
        for f, c in enumerate(clusters):
            member[list(c), f] = True
        share = (member.astype(np.int64) @ member.T.astype(np.int64)) > 0
        pos = share & ~np.eye(n, dtype=bool)
        # items the clustering left out carry no semantic signal
        assigned = member.any(axis=1)
        neg = ~share & assigned[:, None] & assigned[None, :]
        return cls(np.asarray(items, dtype=np.int64), pos, neg)

    @property
    def active(self) -> bool:
        return bool((self.pos.any(axis=1) & self.neg.any(axis=1)).any())


def contrastive_loss(params: ModelParams, units: Sequence[ContrastiveUnit], grads: dict | None = None,
                     scale: float = 1.0) -> float:
    """Average over synthesized users of the summed per-pair loss

    -log( exp(v_j.v*/tau) / sum_{v' in negatives(j)} exp(v_j.v'/tau) ).

    Anchors without a positive or without a negative are skipped; users with
    no valid anchor contribute 0 but still count in the average.
    """
    if not units:
        return 0.0
    E = params.item_embeddings
    tau = params.tau
    total = 0.0
    for u in units:
        rows = u.pos.any(axis=1) & u.neg.any(axis=1)
        if not rows.any():
            continue
        V = E[u.items]
        S = (V @ V.T) / tau
        Sn = np.where(u.neg, S, -np.inf)
        mx = Sn.max(axis=1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        lse = mx[:, 0] + np.log(np.where(u.neg, np.exp(Sn - mx), 0.0).sum(axis=1) + (~rows))
        npos = u.pos.sum(axis=1)
        per_row = npos * lse - np.where(u.pos, S, 0.0).sum(axis=1)
        total += float(per_row[rows].sum())
        if grads is not None:
            dS = np.where(u.neg, np.exp(Sn - lse[:, None]), 0.0) * npos[:, None]
            dS -= u.pos
            dS[~rows] = 0.0
            dV = (dS + dS.T) @ V / tau
            np.add.at(grads["item_embeddings"], u.items, dV * (scale / len(units)))
    return total / len(units)


@dataclass
class LossReport:
    rec_loss: float
    cst_loss: float
    total: float
    lam: float
    cst_evaluated: bool


def total_loss(rec: float, cst: float, lam: float, step_evaluates_cst: bool) -> LossReport:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    total = rec + lam * cst if step_evaluates_cst else rec
    return LossReport(rec, cst, total, lam, step_evaluates_cst)


# -- gradient checking -------------------------------------------------------

def numeric_gradient_check(loss_fn: Callable[[ModelParams, dict | None], float], params: ModelParams,
                           eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params, grads)`` returns the loss and, when ``grads`` is a dict,
    adds the analytic gradient into it.
    """
    grads = zero_grads(params)
    loss_fn(params, grads)
    worst = 0.0
    for name, arr in params.arrays().items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn(params, None)
            flat[i] = old - eps
            fm = loss_fn(params, None)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIIdI")


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    flags = int(params.no_sem) | (int(params.no_col) << 1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.K, params.n_items,
                              params.R, params.tau, flags))
        for n in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    magic, version, d, K, N, R, tau, flags = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    shapes = {"item_embeddings": (N, d), "W": (d, d), "W1": (d, d), "attn_w": (d,), "attn_b": (1,)}
    off = _HEADER.size
    arrays = {}
    for n in PARAM_NAMES:
        cnt = int(np.prod(shapes[n]))
        arrays[n] = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shapes[n]).astype(np.float64)
        off += cnt * 8
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(**arrays, K=K, R=R, tau=tau, no_sem=bool(flags & 1), no_col=bool(flags & 2))
