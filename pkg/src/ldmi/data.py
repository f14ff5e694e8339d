"""Interaction ingestion: parsing, k-core filtering, indexing and chronological splits."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

logger = logging.getLogger(__name__)

K_CORE_MODES = ("alternating", "user", "item")


@dataclass(frozen=True)
class RawEvent:
    user_key: str
    item_key: str
    timestamp: int
    title: str = ""
    rating: float | None = None

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class ParseReport:
    events: list[RawEvent]
    malformed: int = 0


@dataclass
class InteractionLog:
    """Densely indexed interaction log.

    ``sequences[u]`` holds item indices of user ``u`` ordered by timestamp,
    ties resolved by original record order.  ``timestamps[u]`` is aligned
    with ``sequences[u]``.
    """

    user_keys: list[str]
    item_keys: list[str]
    titles: list[str]
    sequences: list[list[int]]
    timestamps: list[list[int]]

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def avg_len(self) -> float:
        return self.n_interactions / max(self.n_users, 1)


@dataclass
class UserSplit:
    user: int
    start: int  # offset of the truncated window in the full sequence
    train: list[int]
    valid: list[int]
    test: list[int]

    @property
    def prefix(self) -> list[int]:
        """Train + validation items, the evaluation-time history."""
        return self.train + self.valid


@dataclass
class SplitSequences:
    users: list[UserSplit] = field(default_factory=list)

    def eval_users(self) -> list[UserSplit]:
        return [u for u in self.users if u.test]

    def __getitem__(self, user: int) -> UserSplit:
        return self.users[user]

    def __len__(self) -> int:
        return len(self.users)


def _event_from_mapping(rec: dict) -> RawEvent:
    rating = rec.get("rating")
    return RawEvent(
        user_key=str(rec["user"]),
        item_key=str(rec["item"]),
        timestamp=int(rec["ts"]),
        title=str(rec.get("title") or ""),
        rating=None if rating in (None, "") else float(rating),
    )


def parse_interactions(stream: TextIO | Iterable[str], fmt: str = "jsonl") -> ParseReport:
    """Parse line-delimited JSON records (or a 5-column CSV with header).

    Malformed lines are skipped and counted; input order is preserved.
    """
    events: list[RawEvent] = []
    malformed = 0
    if fmt == "csv":
        reader = csv.DictReader(stream)
        for row in reader:
            try:
                events.append(_event_from_mapping(row))
            except (KeyError, ValueError, TypeError):
                malformed += 1
    elif fmt == "jsonl":
        for lineno, line in enumerate(stream, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise TypeError("record is not an object")
                events.append(_event_from_mapping(rec))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                malformed += 1
                logger.debug("skipping malformed line %d: %s", lineno, exc)
    else:
        raise ValueError(f"unknown input format {fmt!r}")
    if malformed:
        logger.warning("skipped %d malformed record(s)", malformed)
    return ParseReport(events, malformed)


def read_interactions(path: str | Path) -> ParseReport:
    path = Path(path)
    fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    with open(path, encoding="utf-8", newline="" if fmt == "csv" else None) as fh:
        return parse_interactions(fh, fmt=fmt)


def apply_k_core(events: Sequence[RawEvent], k_core: int, mode: str = "alternating") -> list[RawEvent]:
    """Drop users/items with fewer than ``k_core`` events until nothing changes.

    ``mode`` selects which side is filtered: both alternately (default),
    users only, or items only.
    """
    if k_core < 1:
        raise ValueError("k_core must be >= 1")
    if mode not in K_CORE_MODES:
        raise ValueError(f"mode must be one of {K_CORE_MODES}")
    kept = list(events)
    while True:
        before = len(kept)
        if mode in ("alternating", "user"):
            uc = Counter(e.user_key for e in kept)
            kept = [e for e in kept if uc[e.user_key] >= k_core]
        if mode in ("alternating", "item"):
            ic = Counter(e.item_key for e in kept)
            kept = [e for e in kept if ic[e.item_key] >= k_core]
        if len(kept) == before:
            return kept


def build_log(events: Sequence[RawEvent]) -> InteractionLog:
    """Index users/items in order of first appearance and sort sequences chronologically."""
    user_idx: dict[str, int] = {}
    item_idx: dict[str, int] = {}
    titles: list[str] = []
    per_user: list[list[tuple[int, int, int]]] = []
    for order, e in enumerate(events):
        u = user_idx.setdefault(e.user_key, len(user_idx))
        if u == len(per_user):
            per_user.append([])
        i = item_idx.get(e.item_key)
        if i is None:
            i = item_idx[e.item_key] = len(item_idx)
            titles.append(e.title)
        elif e.title:
            titles[i] = e.title
        per_user[u].append((e.timestamp, order, i))
    sequences, stamps = [], []
    for rows in per_user:
        rows.sort()
        sequences.append([r[2] for r in rows])
        stamps.append([r[0] for r in rows])
    return InteractionLog(list(user_idx), list(item_idx), titles, sequences, stamps)


def split_chronological(
    log: InteractionLog, max_len: int = 20, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
) -> SplitSequences:
    """Per-user 6:2:2 split of the most recent ``max_len`` interactions."""
    if max_len < 5:
        raise ValueError("max_len must be >= 5")
    out = SplitSequences()
    for u, seq in enumerate(log.sequences):
        start = max(0, len(seq) - max_len)
        window = seq[start:]
        n = len(window)
        # small epsilon guards float products such as 0.6 * 10 = 5.999...
        n_train = int(ratios[0] * n + 1e-9)
        n_valid = int(ratios[1] * n + 1e-9)
        out.users.append(
            UserSplit(
                user=u,
                start=start,
                train=window[:n_train],
                valid=window[n_train : n_train + n_valid],
                test=window[n_train + n_valid :],
            )
        )
    return out


def check_k_core(log: InteractionLog, k_core: int) -> bool:
    ic = Counter(i for s in log.sequences for i in s)
    return all(len(s) >= k_core for s in log.sequences) and all(c >= k_core for c in ic.values())


# -- canonical files -------------------------------------------------------

def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def write_canonical_log(log: InteractionLog, fh: TextIO) -> None:
    """Header block (M, N, interaction count) then one TSV line per event.

    Events are emitted user by user in chronological order, so re-ingesting
    the file reproduces the same dense indices.
    """
    fh.write(f"#M\t{log.n_users}\n#N\t{log.n_items}\n#count\t{log.n_interactions}\n")
    fh.write("user_idx\titem_idx\tts\ttitle\n")
    for u, (seq, ts) in enumerate(zip(log.sequences, log.timestamps)):
        for i, t in zip(seq, ts):
            fh.write(f"{u}\t{i}\t{t}\t{_clean(log.titles[i])}\n")


def iter_canonical_events(fh: TextIO) -> Iterator[RawEvent]:
    for line in fh:
        if line.startswith("#") or line.startswith("user_idx\t"):
            continue
        parts = line.rstrip("\n").split("\t", 3)
        if len(parts) < 3:
            continue
        yield RawEvent(parts[0], parts[1], int(parts[2]), parts[3] if len(parts) > 3 else "")


def read_canonical_log(path: str | Path) -> InteractionLog:
    """Load a canonical log; user/item keys are the stored dense indices."""
    with open(path, encoding="utf-8") as fh:
        header = {}
        events = []
        for line in fh:
            if line.startswith("#"):
                k, v = line[1:].rstrip("\n").split("\t")
                header[k] = int(v)
            elif not line.startswith("user_idx\t"):
                events.extend(iter_canonical_events(io.StringIO(line)))
    log = build_log(events)
    # indices were emitted densely, so key order must equal the stored index
    if log.user_keys != [str(u) for u in range(log.n_users)] or header.get("M", log.n_users) != log.n_users:
        raise ValueError(f"{path}: user indices are not dense and ordered")
    titles = [""] * int(header.get("N", log.n_items))
    items_in_order = [int(k) for k in log.item_keys]
    remap = {pos: int(k) for pos, k in enumerate(log.item_keys)}
    for pos, k in enumerate(items_in_order):
        titles[k] = log.titles[pos]
    sequences = [[remap[i] for i in s] for s in log.sequences]
    return InteractionLog(
        user_keys=list(log.user_keys),
        item_keys=[str(i) for i in range(len(titles))],
        titles=titles,
        sequences=sequences,
        timestamps=log.timestamps,
    )


def write_split_manifest(splits: SplitSequences, fh: TextIO) -> None:
    """One line per user: user, window start, then train/valid/test boundaries."""
    fh.write("user_idx\tstart\ttrain_end\tvalid_end\ttest_end\n")
    for s in splits.users:
        a = len(s.train)
        b = a + len(s.valid)
        c = b + len(s.test)
        fh.write(f"{s.user}\t{s.start}\t{a}\t{b}\t{c}\n")


def read_split_manifest(path: str | Path, log: InteractionLog) -> SplitSequences:
    out = SplitSequences()
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, start, a, b, c = (int(x) for x in line.split("\t"))
            window = log.sequences[u][start : start + c]
            out.users.append(UserSplit(u, start, window[:a], window[a:b], window[b:c]))
    return out
