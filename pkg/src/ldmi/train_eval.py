"""Training loop with scheduled contrastive updates, top-n evaluation and baselines."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import SplitSequences, UserSplit
from .llm_interest import SemanticClustering
from .model import (
    ContrastiveUnit,
    LossReport,
    ModelParams,
    build_batch,
    contrastive_loss,
    forward,
    rec_loss,
    sample_negatives,
    score_all,
    total_loss,
    zero_grads,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 128
    epochs: int = 20
    lam: float = 0.01
    tau: float = 0.1
    K: int = 4
    d: int = 64
    R: int = 3
    S: int | None = 1280  # None: full softmax over all items
    seed: int = 0
    no_sem: bool = False
    no_col: bool = False
    no_com: bool = False
    no_rep: bool = False
    G: int = 5
    Z: int | None = None
    k_core: int = 5
    max_len: int = 20
    patience: int = 5
    cst_batch: int = 32
    max_iterations: int | None = None
    emb_std: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @property
    def cst_period(self) -> int | None:
        """Iterations between contrastive updates: floor(1 / lam)."""
        return math.floor(1.0 / self.lam) if self.lam > 0 else None

    def variant_name(self) -> str:
        flags = [n for n in ("no_sem", "no_col", "no_com", "no_rep") if getattr(self, n)]
        return "ldmi" if not flags else "ldmi-" + "-".join(f.replace("no_", "wo") for f in flags)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[LossReport]
    iterations: int
    cst_updates: int
    epochs_run: int
    best_valid_recall: float
    seconds: float
    epoch_seconds: list[float] = field(default_factory=list)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: ModelParams, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = zero_grads(params)
        self.v = zero_grads(params)
        self.t = 0

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.arrays().items():
            g = grads[name]
            if self.wd:
                g = g + self.wd * p
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- inputs ------------------------------------------------------------------

def history_clusters(history: Sequence[int], clustering: SemanticClustering | None,
                     ensure_one: bool = False) -> list[list[int]]:
    """Clusters over the first len(history) analyzed positions, as item indices."""
    out = []
    if clustering is not None:
        out = [[history[p] for p in c] for c in clustering.restrict(range(len(history)))]
    if not out and ensure_one and history:
        out = [list(history)]
    return out


def training_examples(splits: SplitSequences) -> list[tuple[int, int]]:
    """(user, t): input is train[:t], target is train[t]."""
    return [(s.user, t) for s in splits.users for t in range(1, len(s.train))]


def contrastive_units(synth_items: Mapping[int, Sequence[int]],
                      clusterings: Mapping[int, SemanticClustering]) -> list[ContrastiveUnit]:
    units = []
    for owner in sorted(synth_items):
        c = clusterings.get(owner)
        if c is None:
            continue
        units.append(ContrastiveUnit.from_clusters(synth_items[owner], [sorted(m) for _, m in c.clusters]))
    return units


# -- training ------------------------------------------------------------------

def train(config: TrainConfig, splits: SplitSequences, n_items: int,
          clusterings: Mapping[int, SemanticClustering] | None = None,
          units: Sequence[ContrastiveUnit] = (), valid: bool = True) -> TrainResult:
    """Minimize the next-item loss, adding lam * contrastive loss every floor(1/lam) iterations."""
    if units and config.lam <= 0:
        raise ValueError("contrastive units given but lam == 0")
    clusterings = clusterings or {}
    rng = np.random.default_rng(config.seed)
    params = ModelParams.init(n_items, config.d, rng, K=config.K, R=config.R, tau=config.tau,
                              no_sem=config.no_sem, no_col=config.no_col, emb_std=config.emb_std)
    opt = Adam(params, config.lr, config.weight_decay)
    examples = training_examples(splits)
    if not examples:
        raise ValueError("no training examples: every train prefix is shorter than 2")
    full_softmax = config.S is None or config.S >= n_items - 1
    period = config.cst_period
    trace: list[LossReport] = []
    it = cst_updates = 0
    best, best_params, bad_epochs = -1.0, params.copy(), 0
    epoch_seconds = []
    t_start = time.perf_counter()
    epoch = 0
    done = False
    for epoch in range(1, config.epochs + 1):
        t_ep = time.perf_counter()
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            it += 1
            chunk = [examples[i] for i in order[start : start + config.batch_size]]
            hists, clus, targets = [], [], []
            for u, t in chunk:
                h = splits[u].train[:t]
                hists.append(h)
                clus.append(history_clusters(h, clusterings.get(u), ensure_one=config.no_col))
                targets.append(splits[u].train[t])
            batch = build_batch(hists, clus, params.K, rng)
            targets = np.asarray(targets, dtype=np.int64)
            negs = None if full_softmax else sample_negatives(targets, n_items, config.S, rng)
            grads = zero_grads(params)
            rec, _ = rec_loss(params, batch, targets, negs, grads=grads)
            do_cst = bool(units) and period is not None and it % period == 0
            cst = 0.0
            if do_cst:
                k = min(config.cst_batch, len(units))
                pick = rng.choice(len(units), size=k, replace=False)
                cst = contrastive_loss(params, [units[i] for i in sorted(pick)], grads, scale=config.lam)
                cst_updates += 1
            report = total_loss(rec, cst, config.lam, do_cst)
            if not np.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss at iteration {it}: rec={rec} cst={cst}")
            opt.step(params, grads)
            trace.append(report)
            if config.max_iterations is not None and it >= config.max_iterations:
                done = True
                break
        epoch_seconds.append(time.perf_counter() - t_ep)
        if valid:
            score = evaluate(params, splits, clusterings, n_list=(20,), seed=config.seed, phase="valid").means["R@20"]
            logger.info("epoch %d: iter %d, loss %.4f, valid R@20 %.4f", epoch, it, trace[-1].total, score)
            if score > best:
                best, best_params, bad_epochs = score, params.copy(), 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
        else:
            best_params = params
        if done:
            break
    return TrainResult(best_params if valid else params, trace, it, cst_updates, epoch, best,
                       time.perf_counter() - t_start, epoch_seconds)


# -- evaluation ---------------------------------------------------------------

@dataclass
class MetricsReport:
    n_list: tuple[int, ...]
    users: list[int]
    per_user: dict[str, np.ndarray]  # metric name -> (n_users,)
    seconds: float = 0.0
    cst_updates: int = 0

    @property
    def means(self) -> dict[str, float]:
        return {k: float(v.mean()) if len(v) else 0.0 for k, v in self.per_user.items()}

    def columns(self) -> list[str]:
        return [f"{m}@{n}" for n in self.n_list for m in ("R", "N", "H")]

    def records(self):
        for i, u in enumerate(self.users):
            for name in self.columns():
                yield {"user": u, "metric": name, "value": float(self.per_user[name][i])}

    def write(self, path_prefix: str | Path, name: str = "") -> None:
        path_prefix = Path(path_prefix)
        with open(path_prefix.with_suffix(".jsonl"), "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        summary = {"name": name, "means": self.means, "n_users": len(self.users), "cst_updates": self.cst_updates}
        with open(path_prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def table(self, name: str = "model") -> str:
        cols = self.columns()
        head = f"{'':<16}" + "".join(f"{c:>9}" for c in cols)
        row = f"{name:<16}" + "".join(f"{self.means[c]:>9.4f}" for c in cols)
        return head + "\n" + row


def rank_metrics(ranked: Sequence[int], targets: set[int], n: int) -> tuple[float, float, float]:
    """Recall, NDCG and hit rate of a ranked list cut at n."""
    if not targets:
        return 0.0, 0.0, 0.0
    hits = [r for r, item in enumerate(ranked[:n], 1) if item in targets]
    recall = len(hits) / len(targets)
    dcg = sum(1.0 / math.log2(r + 1) for r in hits)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(targets), n) + 1))
    return recall, dcg / idcg, float(bool(hits))


def _top_n(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n highest scores; ties go to the smaller index."""
    n = min(n, scores.shape[0])
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    part = np.argpartition(-scores, n - 1)[:n]
    cut = scores[part].min()
    cand = np.flatnonzero(scores >= cut)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:n]]


def _eval_pairs(splits: SplitSequences, phase: str):
    for s in splits.users:
        if phase == "test":
            hist, targets = s.prefix, s.test
        elif phase == "valid":
            hist, targets = s.train, s.valid
        else:
            raise ValueError(f"unknown phase {phase!r}")
        if hist and targets:
            yield s, hist, targets


def _empty_report(n_list, users) -> MetricsReport:
    per_user = {f"{m}@{n}": np.zeros(len(users)) for n in n_list for m in ("R", "N", "H")}
    return MetricsReport(tuple(n_list), list(users), per_user)


def evaluate(params: ModelParams, splits: SplitSequences,
             clusterings: Mapping[int, SemanticClustering] | None = None,
             n_list: Sequence[int] = (20, 50), seed: int = 0, phase: str = "test",
             batch_size: int = 256) -> MetricsReport:
    """Rank every item by readout score, excluding the user's history, and score the top-n."""
    t0 = time.perf_counter()
    clusterings = clusterings or {}
    pairs = list(_eval_pairs(splits, phase))
    report = _empty_report(n_list, [s.user for s, _, _ in pairs])
    nmax = max(n_list)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        hists = [h for _, h, _ in chunk]
        clus = [history_clusters(h, clusterings.get(s.user), ensure_one=params.no_col) for s, h, _ in chunk]
        L = max(len(h) for h in hists)
        g0 = np.zeros((len(chunk), L, params.K))
        for i, (s, h, _) in enumerate(chunk):
            # per-user seeding keeps results independent of batching
            g0[i, : len(h)] = np.random.default_rng([seed, s.user]).standard_normal((len(h), params.K))
        batch = build_batch(hists, clus, params.K, None, g0=g0)
        scores = score_all(params, forward(params, batch))
        for i, (s, h, targets) in enumerate(chunk):
            w = splits[s.user]
            window = w.train + w.valid + w.test
            # history and targets are disjoint consecutive slices of the window
            assert list(h) == window[: len(h)] and list(targets) == window[len(h) : len(h) + len(targets)]
            row = scores[i].copy()
            row[list(h)] = -np.inf
            ranked = _top_n(row, nmax).tolist()
            tset = set(targets)
            for n in n_list:
                r, nd, hr = rank_metrics(ranked, tset, n)
                j = start + i
                report.per_user[f"R@{n}"][j] = r
                report.per_user[f"N@{n}"][j] = nd
                report.per_user[f"H@{n}"][j] = hr
    report.seconds = time.perf_counter() - t0
    return report


def popularity_baseline(splits: SplitSequences, n_items: int, n_list: Sequence[int] = (20, 50),
                        phase: str = "test") -> MetricsReport:
    """Rank items by how often they occur in the training spans."""
    train_items = [i for s in splits.users for i in s.train]
    if not train_items:
        raise ValueError("empty training split")
    t0 = time.perf_counter()
    counts = np.bincount(train_items, minlength=n_items).astype(np.float64)
    pairs = list(_eval_pairs(splits, phase))
    report = _empty_report(n_list, [s.user for s, _, _ in pairs])
    nmax = max(n_list)
    for j, (s, h, targets) in enumerate(pairs):
        row = counts.copy()
        row[list(h)] = -np.inf
        ranked = _top_n(row, nmax).tolist()
        for n in n_list:
            r, nd, hr = rank_metrics(ranked, set(targets), n)
            report.per_user[f"R@{n}"][j] = r
            report.per_user[f"N@{n}"][j] = nd
            report.per_user[f"H@{n}"][j] = hr
    report.seconds = time.perf_counter() - t0
    return report


def interest_heatmap(params: ModelParams, history: Sequence[int], clustering: SemanticClustering | None = None,
                     seed: int = 0, user: int = 0) -> np.ndarray:
    """Cosine similarity (K x L) between each hybrid interest and each history item."""
    h = list(history)
    g0 = np.random.default_rng([seed, user]).standard_normal((1, len(h), params.K))
    batch = build_batch([h], [history_clusters(h, clustering, ensure_one=params.no_col)], params.K, None, g0=g0)
    o = forward(params, batch).o[0]
    V = params.item_embeddings[h]
    on = np.linalg.norm(o, axis=1, keepdims=True)
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    denom = on @ vn.T
    return np.divide(o @ V.T, denom, out=np.zeros((o.shape[0], len(h))), where=denom > 0)


def mean_row_correlation(grid: np.ndarray) -> float:
    """Mean Pearson correlation over pairs of rows; constant rows are skipped."""
    rows = [r for r in grid if np.std(r) > 1e-12]
    if len(rows) < 2:
        return float("nan")
    c = np.corrcoef(np.vstack(rows))
    iu = np.triu_indices(len(rows), 1)
    return float(c[iu].mean())


def write_trace(trace: Sequence[LossReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for step, r in enumerate(trace, 1):
            fh.write(json.dumps({"step": step, **asdict(r)}, sort_keys=True) + "\n")
