"""Synthesized users from user cliques and their selection by weighted max coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .data import InteractionLog

EXACT_MAX_SUBSETS = 2_000_000  # candidate subsets the exact search accepts


@dataclass
class Clique:
    anchor: int
    members: list[int]
    behavior_union: list[int]  # distinct items, ordered by first timestamp among members
    member_count: dict[int, int]


@dataclass
class CoverageInstance:
    """Rows are synthesized users (sets), columns are items (objects)."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    budget: int

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], weights, budget: int) -> "CoverageInstance":
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(r) for r in rows])
        indices = np.fromiter((j for r in rows for j in r), dtype=np.int64, count=int(indptr[-1]))
        return cls(indptr, indices, weights, budget)

    @property
    def n_rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_cols(self) -> int:
        return len(self.weights)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def dense(self) -> np.ndarray:
        A = np.zeros((self.n_rows, self.n_cols), dtype=np.int64)
        for i in range(self.n_rows):
            A[i, self.row(i)] = 1
        return A


@dataclass
class Selection:
    indicator: np.ndarray
    chosen: list[int]
    covered_value: float


def neighbor_users(log: InteractionLog, anchor: int, G: int, metric: str = "overlap") -> list[int]:
    """The anchor followed by up to G-1 users sharing the most items with it."""
    if G < 1:
        raise ValueError("G must be >= 1")
    base = set(log.sequences[anchor])
    scored = []
    for u, seq in enumerate(log.sequences):
        if u == anchor:
            continue
        s = set(seq)
        inter = len(base & s)
        if inter == 0:
            continue
        score = inter if metric == "overlap" else inter / len(base | s)
        scored.append((-score, u))
    scored.sort()
    return [anchor] + [u for _, u in scored[: G - 1]]


def _csr(groups: Sequence[Sequence[int]]):
    indptr = np.zeros(len(groups) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(g) for g in groups])
    flat = np.fromiter((x for g in groups for x in g), dtype=np.int64, count=int(indptr[-1]))
    return indptr, flat


def all_neighbors(log: InteractionLog, G: int, metric: str = "overlap") -> list[list[int]]:
    """``neighbor_users`` for every anchor via an item->user inverted index."""
    users_items = [sorted(set(s)) for s in log.sequences]
    item_users: list[list[int]] = [[] for _ in range(log.n_items)]
    for u, items in enumerate(users_items):
        for i in items:
            item_users[i].append(u)
    uptr, uitems = _csr(users_items)
    iptr, iusers = _csr(item_users)
    table = kernels.topk_neighbors(uptr, uitems, iptr, iusers, G, metric == "jaccard")
    return [[int(u) for u in row if u >= 0] for row in table]


def clique_from_members(log: InteractionLog, anchor: int, members: Sequence[int]) -> Clique:
    first: dict[int, tuple[int, int, int]] = {}
    counts: dict[int, int] = {}
    for rank, u in enumerate(members):
        seen = set()
        for pos, (i, t) in enumerate(zip(log.sequences[u], log.timestamps[u])):
            key = (t, rank, pos)
            if i not in first or key < first[i]:
                first[i] = key
            if i not in seen:
                counts[i] = counts.get(i, 0) + 1
                seen.add(i)
    union = sorted(first, key=lambda i: (first[i], i))
    return Clique(anchor, list(members), union, counts)


def build_cliques(log: InteractionLog, G: int = 5, metric: str = "overlap") -> list[Clique]:
    if log.n_users == 0:
        raise ValueError("empty log")
    return [clique_from_members(log, a, nb) for a, nb in enumerate(all_neighbors(log, G, metric))]


def random_cliques(log: InteractionLog, rng: np.random.Generator) -> list[Clique]:
    """Synthesized users without the compactness rule.

    Row i is a uniform random item subset as large as user i's own history.
    """
    out = []
    for a, seq in enumerate(log.sequences):
        size = min(log.n_items, max(len(set(seq)), 1))
        items = rng.choice(log.n_items, size=size, replace=False).tolist()
        out.append(Clique(a, [a], items, {i: 1 for i in items}))
    return out


def item_values(log: InteractionLog) -> np.ndarray:
    """1 + (users containing the item) / (total interactions)."""
    total = log.n_interactions
    if total <= 0:
        raise ValueError("no interactions")
    users_with = np.zeros(log.n_items, dtype=np.float64)
    for seq in log.sequences:
        users_with[list(set(seq))] += 1
    return 1.0 + users_with / total


def coverage_instance(cliques: Sequence[Clique], weights, budget: int) -> CoverageInstance:
    rows = [sorted(c.behavior_union) for c in cliques]
    return CoverageInstance.from_rows(rows, weights, budget)


def default_budget(n_users: int, frac: float = 0.05) -> int:
    return max(1, math.ceil(frac * n_users))


def coverage_value(indicator, instance: CoverageInstance) -> float:
    """Indicator form: sum of w_j over columns with (sum_i x_i A_ij) >= 1."""
    x = np.asarray(indicator)
    if x.shape != (instance.n_rows,):
        raise ValueError("indicator length must equal the number of rows")
    hits = np.zeros(instance.n_cols, dtype=np.int64)
    for i in range(instance.n_rows):
        if x[i]:
            hits[instance.row(i)] += 1
    return math.fsum(instance.weights[hits >= 1])


def coverage_value_union(chosen, instance: CoverageInstance) -> float:
    """Set-union form: sum of w_j over the union of the chosen rows."""
    union: set[int] = set()
    for i in chosen:
        union.update(instance.row(i).tolist())
    return math.fsum(instance.weights[j] for j in union)


def _selection(chosen, instance: CoverageInstance) -> Selection:
    x = np.zeros(instance.n_rows, dtype=bool)
    x[list(chosen)] = True
    return Selection(x, [int(i) for i in chosen], coverage_value(x, instance))


def solve_mcp_greedy(instance: CoverageInstance) -> Selection:
    chosen = kernels.lazy_greedy(instance.indptr, instance.indices, instance.weights, instance.budget)
    return _selection(chosen, instance)


def solve_mcp_naive_greedy(instance: CoverageInstance) -> Selection:
    """Plain greedy that re-scores every row each round; a reference for the lazy variant."""
    covered = np.zeros(instance.n_cols, dtype=bool)
    chosen: list[int] = []
    while len(chosen) < instance.budget:
        best, best_gain = -1, 0.0
        for i in range(instance.n_rows):
            g = 0.0
            for j in instance.row(i):
                if not covered[j]:
                    g += instance.weights[j]
            if g > best_gain:
                best, best_gain = i, g
        if best < 0:
            break
        chosen.append(best)
        covered[instance.row(best)] = True
    return _selection(chosen, instance)


def solve_mcp_exact(instance: CoverageInstance) -> Selection:
    """Branch and bound over row subsets; exponential, so limited to small instances."""
    P = instance.n_rows
    n_subsets = sum(math.comb(P, k) for k in range(min(instance.budget, P) + 1))
    if n_subsets > EXACT_MAX_SUBSETS:
        raise ValueError(f"instance too large for exact search: {n_subsets} subsets > {EXACT_MAX_SUBSETS}")
    w = instance.weights
    masks = []
    for i in range(P):
        mk = 0
        for j in instance.row(i):
            mk |= 1 << int(j)
        masks.append(mk)

    wl = w.tolist()

    def value(mask: int) -> float:
        s = 0.0
        while mask:
            low = mask & -mask
            s += wl[low.bit_length() - 1]
            mask ^= low
        return s

    Z = min(instance.budget, P)
    best_val = -1.0
    best_set: tuple[int, ...] = ()

    def dfs(start: int, picked: tuple[int, ...], cov: int, val: float):
        nonlocal best_val, best_set
        if val > best_val:
            best_val, best_set = val, picked
        left = Z - len(picked)
        if left == 0 or start >= P:
            return
        gains = sorted((value(masks[i] & ~cov) for i in range(start, P)), reverse=True)
        if val + sum(gains[:left]) <= best_val:
            return
        for i in range(start, P):
            g = value(masks[i] & ~cov)
            if g <= 0:
                continue
            dfs(i + 1, picked + (i,), cov | masks[i], val + g)

    dfs(0, (), 0, 0.0)
    return _selection(best_set, instance)


def random_selection(instance: CoverageInstance, rng: np.random.Generator) -> Selection:
    k = min(instance.budget, instance.n_rows)
    chosen = sorted(rng.choice(instance.n_rows, size=k, replace=False).tolist())
    return _selection(chosen, instance)


# -- files -------------------------------------------------------------------

def write_instance(instance: CoverageInstance, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{instance.n_rows} {instance.n_cols} {instance.budget}\n")
        for i in range(instance.n_rows):
            fh.write(" ".join(str(int(j)) for j in instance.row(i)) + "\n")
        fh.write(" ".join(repr(float(x)) for x in instance.weights) + "\n")


def read_instance(path: str | Path) -> CoverageInstance:
    with open(path, encoding="utf-8") as fh:
        P, Q, Z = (int(x) for x in fh.readline().split())
        rows = [[int(x) for x in fh.readline().split()] for _ in range(P)]
        weights = [float(x) for x in fh.readline().split()]
    if len(weights) != Q:
        raise ValueError(f"{path}: expected {Q} weights, got {len(weights)}")
    return CoverageInstance.from_rows(rows, weights, Z)


def write_selection(sel: Selection, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(i) for i in sel.chosen) + "\n")
        fh.write(f"{sel.covered_value!r}\n")


def read_selection(path: str | Path, n_rows: int) -> Selection:
    with open(path, encoding="utf-8") as fh:
        chosen = [int(x) for x in fh.readline().split()]
        value = float(fh.readline())
    x = np.zeros(n_rows, dtype=bool)
    x[chosen] = True
    return Selection(x, chosen, value)


def write_cliques(cliques: Sequence[Clique], path: str | Path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for c in cliques:
            fh.write(json.dumps({"anchor": c.anchor, "members": c.members, "items": c.behavior_union}) + "\n")


def read_cliques(path: str | Path) -> list[Clique]:
    import json

    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(Clique(rec["anchor"], rec["members"], rec["items"], {}))
    return out
