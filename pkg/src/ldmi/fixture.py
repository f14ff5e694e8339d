"""Synthetic interaction data with planted topics, for offline tests and benchmarks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RawEvent

TOPIC_WORDS = ("shampoo", "chess", "guitar", "teapot", "sneaker", "lantern", "puzzle", "candle")

# 500 users, 200 items, 4 topics, 2 per user; short histories like a sparse review corpus
ACCEPTANCE_FIXTURE = dict(n_users=500, n_items=200, n_topics=4, topics_per_user=2,
                          min_len=5, max_len=9, p_group=0.8)
# the small dataset shipped with the package (all 50 users survive the 5-core)
BUNDLED_FIXTURE = dict(n_users=50, n_items=40, min_len=6, max_len=10, p_group=0.8, seed=2)
BUNDLED_DIR = Path(__file__).parent / "data" / "fixture50"


@dataclass
class PlantedFixture:
    events: list[RawEvent]
    item_topic: dict[str, int]  # item key -> topic
    user_topics: dict[str, tuple[int, ...]]


def make_planted_fixture(n_users: int = 500, n_items: int = 200, n_topics: int = 4, topics_per_user: int = 2,
                         min_len: int = 10, max_len: int = 20, n_groups: int = 5, p_group: float = 0.6,
                         p_noise: float = 0.05, seed: int = 0) -> PlantedFixture:
    """Users mixing a few planted topics.

    Items are split evenly over topics, and each topic into ``n_groups``
    groups.  A user picks ``topics_per_user`` topics and one group inside
    each; every interaction picks one of the user's topics, then an item of
    the user's group with probability ``p_group`` (else anywhere in the
    topic), or with probability ``p_noise`` a random item.  Titles carry the
    topic word plus a topic-specific code, so titles of different topics
    share no token.
    """
    if n_topics > len(TOPIC_WORDS):
        raise ValueError(f"at most {len(TOPIC_WORDS)} topics")
    rng = np.random.default_rng(seed)
    topic_of = np.arange(n_items) % n_topics
    topic_items = [np.flatnonzero(topic_of == t) for t in range(n_topics)]
    groups = [np.array_split(items, n_groups) for items in topic_items]
    titles = {}
    for t, items in enumerate(topic_items):
        word = TOPIC_WORDS[t]
        for rank, i in enumerate(items):
            titles[i] = f"{word.capitalize()} {word[0].upper()}{rank + 1}"
    events: list[RawEvent] = []
    user_topics: dict[str, tuple[int, ...]] = {}
    ts = 0
    for u in range(n_users):
        ukey = f"U{u:04d}"
        tops = tuple(sorted(rng.choice(n_topics, size=topics_per_user, replace=False).tolist()))
        user_topics[ukey] = tops
        grp = {t: groups[t][rng.integers(n_groups)] for t in tops}
        length = int(rng.integers(min_len, max_len + 1))
        seen: set[int] = set()
        while len(seen) < length:
            if rng.random() < p_noise:
                item = int(rng.integers(n_items))
            else:
                t = tops[rng.integers(len(tops))]
                pool = grp[t] if rng.random() < p_group else topic_items[t]
                item = int(rng.choice(pool))
            if item in seen:
                continue
            seen.add(item)
            ts += int(rng.integers(1, 100))
            events.append(RawEvent(ukey, f"I{item:04d}", ts, titles[item]))
    item_topic = {f"I{i:04d}": int(topic_of[i]) for i in range(n_items)}
    return PlantedFixture(events, item_topic, user_topics)


def write_events_jsonl(events, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps({"user": e.user_key, "item": e.item_key, "ts": e.timestamp, "title": e.title}) + "\n")


FIXTURE_CONFIG = """\
# Offline pipeline over the bundled 50-user fixture with the mock clusterer.
data:
  input: events.jsonl
  k_core: 5
  max_len: 20
llm:
  mock: true
synthesis:
  G: 5
train:
  K: 4
  d: 16
  epochs: 5
  lr: 0.01
  batch_size: 64
  lam: 0.1
variants: [full, no_sem]
seeds: [0]
n_list: [20, 50]
heatmap_users: 2
output_dir: out
"""


def write_bundled_fixture(dest: str | Path = BUNDLED_DIR) -> Path:
    """Regenerate the shipped fixture: raw events, a config and mock clusterings."""
    from .data import apply_k_core, build_log, split_chronological
    from .llm_interest import write_clusterings
    from .pipeline import crowd_clusterings, individual_clusterings, synthesize, visible_log

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    fx = make_planted_fixture(**BUNDLED_FIXTURE)
    write_events_jsonl(fx.events, dest / "events.jsonl")
    (dest / "config.yaml").write_text(FIXTURE_CONFIG, encoding="utf-8")
    log = build_log(apply_k_core(fx.events, 5))
    splits = split_chronological(log, 20)
    write_clusterings(individual_clusterings(log, splits).values(), dest / "individual.jsonl")
    synth = synthesize(visible_log(log, splits), G=5)
    crowd = crowd_clusterings(log, synth)
    write_clusterings([crowd[o] for o in sorted(crowd)], dest / "crowd.jsonl")
    return dest
