"""Semantic interest clusters from item titles, via a chat-completions LLM or an offline mock."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
PROMPT_TOKEN_BUDGET = 4096  # rough ceiling; long histories are sent whole but logged

SYSTEM_TEXT = (
    "You are an expert analyst of e-commerce user behavior. "
    "You group the items a user engaged with into interest clusters."
)

_INSTRUCTIONS = """\
Below is the chronological list of items engaged by one user.

{items}

Task: analyze the user's behaviors and group the numbered items into distinct
clusters, where each cluster reflects one different interest of the user
(for example a functionality, a style or a preference). Give each cluster a
short descriptive label. An item may appear in more than one cluster if it
serves several interests.

Output format: return ONLY one JSON object, no prose, mapping each cluster
label to the list of item numbers (integers between 1 and {n}) it contains.
Example: {{"Hair Care": [1, 3], "Board Games": [2]}}"""

_STOP_WORDS = frozenset(
    """a an and are as at be by for from in into is it of on or the to with
    without your you our set pack pcs piece pieces new""".split()
)


class LLMError(RuntimeError):
    """Remote analysis failed after retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ConfigError(RuntimeError):
    pass


class CacheMiss(LLMError):
    pass


class BudgetExhausted(LLMError):
    pass


@dataclass(frozen=True)
class PromptText:
    system_text: str
    user_text: str
    version: str = TEMPLATE_VERSION


@dataclass
class SemanticClustering:
    owner: int
    clusters: list[tuple[str, frozenset[int]]]
    unassigned: frozenset[int] = frozenset()
    source: str = "llm"

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def restrict(self, keep: Iterable[int]) -> list[list[int]]:
        """Member lists limited to ``keep`` positions; empty clusters dropped."""
        keep = set(keep)
        out = []
        for _, members in self.clusters:
            sel = sorted(m for m in members if m in keep)
            if sel:
                out.append(sel)
        return out

    def to_record(self) -> dict:
        return {
            "owner": self.owner,
            "clusters": [{"label": lab, "members": sorted(m)} for lab, m in self.clusters],
            "unassigned": sorted(self.unassigned),
            "source": self.source,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SemanticClustering":
        return cls(
            owner=int(rec["owner"]),
            clusters=[(c["label"], frozenset(int(m) for m in c["members"])) for c in rec["clusters"]],
            unassigned=frozenset(int(m) for m in rec.get("unassigned", [])),
            source=rec.get("source", "llm"),
        )


def _normalize_title(title: str, position: int) -> str:
    title = " ".join(title.split())
    return title or f"item {position}"


def build_prompt(titles: Sequence[str]) -> PromptText:
    if not titles:
        raise ValueError("nothing to analyze")
    lines = [f"{i}. {_normalize_title(t, i)}" for i, t in enumerate(titles, 1)]
    user_text = _INSTRUCTIONS.format(items="\n".join(lines), n=len(titles))
    return PromptText(SYSTEM_TEXT, user_text)


def estimate_tokens(prompt: PromptText) -> int:
    words = len(prompt.system_text.split()) + len(prompt.user_text.split())
    return int(words * 1.5 + 0.5)


# -- parsing ---------------------------------------------------------------

def _first_json_object(raw: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", raw):
        try:
            obj, _ = decoder.raw_decode(raw, m.start())
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _as_int(x) -> int | None:
    if isinstance(x, bool):
        return None
    if isinstance(x, int):
        return x
    if isinstance(x, float) and x.is_integer():
        return int(x)
    if isinstance(x, str) and x.strip().lstrip("-").isdigit():
        return int(x.strip())
    return None


def parse_clusters(raw: str, n_items: int, owner: int = -1) -> SemanticClustering:
    """Parse the first JSON object in ``raw`` into 0-based member positions.

    Never raises: unparsable text yields a single fallback cluster with all
    items.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    obj = _first_json_object(raw) if isinstance(raw, str) else None
    clusters: list[tuple[str, frozenset[int]]] = []
    dropped = 0
    if obj is not None:
        for label, members in obj.items():
            if not isinstance(members, list):
                members = [members]
            keep = set()
            for x in members:
                v = _as_int(x)
                if v is None or not 1 <= v <= n_items:
                    dropped += 1
                    continue
                keep.add(v - 1)
            if keep:
                clusters.append((str(label), frozenset(keep)))
    if dropped:
        logger.warning("owner %s: dropped %d out-of-range item reference(s)", owner, dropped)
    if not clusters:
        return SemanticClustering(owner, [("all", frozenset(range(n_items)))], frozenset(), "fallback")
    covered = frozenset().union(*(m for _, m in clusters))
    return SemanticClustering(owner, clusters, frozenset(range(n_items)) - covered, "llm")


# -- offline substitute ----------------------------------------------------

def _tokens(title: str) -> list[str]:
    words = re.sub(r"[^\w\s]", " ", title.lower()).split()
    return [w for w in words if w not in _STOP_WORDS]


def mock_cluster(titles: Sequence[str], owner: int = -1) -> SemanticClustering:
    """Connected components of the shared-token graph over titles."""
    if not titles:
        raise ValueError("nothing to analyze")
    n = len(titles)
    toks = [set(_tokens(t)) for t in titles]
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    first_seen: dict[str, int] = {}
    for i, ts in enumerate(toks):
        for t in sorted(ts):
            j = first_seen.setdefault(t, i)
            if j != i:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    clusters = []
    for root in sorted(groups):
        members = groups[root]
        counts = Counter(t for i in members for t in toks[i])
        if len(members) > 1:
            shared = {t: c for t, c in counts.items() if c > 1}
            counts = Counter(shared) or counts
        # most frequent token, ties alphabetical
        label = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0] if counts else f"item {root + 1}"
        clusters.append((label, frozenset(members)))
    return SemanticClustering(owner, clusters, frozenset(), "mock")


# -- remote client ---------------------------------------------------------

@dataclass
class ClientConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    temperature: float = 0.0
    api_key_env: str = "OPENAI_API_KEY"
    cache_dir: str | Path = ".ldmi_cache"
    offline: bool = False
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    timeout: float = 60.0
    max_calls: int | None = None
    max_concurrency: int = 4


def cache_key(cfg: ClientConfig, prompt: PromptText) -> str:
    payload = json.dumps(
        [cfg.model, cfg.temperature, prompt.version, prompt.system_text, prompt.user_text],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """One file per key; writes go through a temp file and an atomic rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / key

    def get(self, key: str) -> str | None:
        p = self.path(key)
        if not p.exists():
            return None
        return p.read_bytes().decode("utf-8")

    def put(self, key: str, raw: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw.encode("utf-8"))
        os.replace(tmp, self.path(key))


_TRANSIENT = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass
class LLMClient:
    config: ClientConfig
    transport: httpx.BaseTransport | None = None
    sleep: callable = time.sleep
    calls: int = 0
    attempts: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.cache = ResponseCache(self.config.cache_dir)
        self._http: httpx.Client | None = None

    def _client(self) -> httpx.Client:
        if self._http is None:
            key = os.environ.get(self.config.api_key_env)
            if not key:
                raise ConfigError(f"environment variable {self.config.api_key_env} is not set")
            self._http = httpx.Client(
                base_url=self.config.base_url,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.config.timeout,
                transport=self.transport,
            )
        return self._http

    def cached(self, prompt: PromptText) -> str | None:
        return self.cache.get(cache_key(self.config, prompt))

    def request_clusters(self, prompt: PromptText) -> str:
        key = cache_key(self.config, prompt)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if self.config.offline:
            raise CacheMiss("cache miss in offline mode")
        with self._lock:
            http = self._client()
            if self.config.max_calls is not None and self.calls >= self.config.max_calls:
                raise BudgetExhausted("LLM call budget exhausted")
            self.calls += 1
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
        }
        status = None
        for attempt in range(1, self.config.max_attempts + 1):
            with self._lock:
                self.attempts += 1
            try:
                resp = http.post("/chat/completions", json=body)
                status = resp.status_code
            except httpx.TransportError as exc:
                logger.warning("attempt %d: transport error %s", attempt, exc)
                status = None
            else:
                if status == 200:
                    raw = resp.json()["choices"][0]["message"]["content"]
                    self.cache.put(key, raw)
                    return raw
                if status not in _TRANSIENT:
                    raise LLMError(f"LLM endpoint returned HTTP {status}", status)
                logger.warning("attempt %d: HTTP %d, backing off", attempt, status)
            if attempt < self.config.max_attempts:
                self.sleep(min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1)))
        raise LLMError(f"retries exhausted (last status {status})", status)

    def close(self) -> None:
        if self._http is not None:
            self._http.close()
            self._http = None


def analyze(titles: Sequence[str], owner: int, client: LLMClient | None = None) -> SemanticClustering:
    """Cluster one owner's titles; ``client=None`` uses the offline mock."""
    if client is None:
        return mock_cluster(titles, owner)
    prompt = build_prompt(titles)
    if estimate_tokens(prompt) > PROMPT_TOKEN_BUDGET:
        logger.warning("owner %s: prompt of ~%d tokens exceeds the %d budget", owner,
                       estimate_tokens(prompt), PROMPT_TOKEN_BUDGET)
    raw = client.request_clusters(prompt)
    return parse_clusters(raw, len(titles), owner)


def dump_clusterings(records: Iterable[SemanticClustering], fh) -> None:
    for c in records:
        fh.write(json.dumps(c.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def write_clusterings(records: Iterable[SemanticClustering], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_clusterings(records, fh)


def read_clusterings(path: str | Path) -> dict[int, SemanticClustering]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                c = SemanticClustering.from_record(json.loads(line))
                out[c.owner] = c
    return out
