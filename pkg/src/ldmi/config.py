"""Pipeline configuration read from a YAML file."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .llm_interest import ClientConfig
from .train_eval import TrainConfig

VARIANT_FLAGS = {
    "full": {},
    "no_sem": {"no_sem": True},
    "no_col": {"no_col": True},
    "no_com": {"no_com": True},
    "no_rep": {"no_rep": True},
}


class ConfigFileError(ValueError):
    pass


@dataclass
class DataSection:
    input: Path | None = None
    format: str = "auto"  # auto | jsonl | csv
    k_core: int = 5
    k_core_mode: str = "alternating"
    max_len: int = 20


@dataclass
class LLMSection:
    mock: bool = False
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    offline: bool = False
    cache_dir: Path | None = None  # default: <output_dir>/llm_cache
    max_concurrency: int = 4
    max_calls: int | None = None
    max_attempts: int = 5
    backoff_base: float = 1.0
    timeout: float = 60.0


@dataclass
class SynthesisSection:
    G: int = 5
    Z: int | None = None
    metric: str = "overlap"


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    llm: LLMSection = field(default_factory=LLMSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: list[str] = field(default_factory=lambda: ["full"])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_list: list[int] = field(default_factory=lambda: [20, 50])
    heatmap_users: int = 3
    output_dir: Path = Path("ldmi_out")

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANT_FLAGS]
        if unknown:
            raise ConfigFileError(f"unknown variants {unknown}; choose from {sorted(VARIANT_FLAGS)}")
        if not self.seeds:
            raise ConfigFileError("seeds must not be empty")
        if self.synthesis.metric not in ("overlap", "jaccard"):
            raise ConfigFileError("synthesis.metric must be overlap or jaccard")

    def client_config(self) -> ClientConfig:
        c = self.llm
        return ClientConfig(base_url=c.base_url, model=c.model, api_key_env=c.api_key_env,
                            cache_dir=c.cache_dir or self.output_dir / "llm_cache", offline=c.offline,
                            max_attempts=c.max_attempts, backoff_base=c.backoff_base, timeout=c.timeout,
                            max_calls=c.max_calls, max_concurrency=c.max_concurrency)

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed, G=self.synthesis.G, Z=self.synthesis.Z,
                       k_core=self.data.k_core, max_len=self.data.max_len, **VARIANT_FLAGS[variant])


def _section(cls, raw: Any, name: str, base: Path | None = None, paths: tuple[str, ...] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigFileError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigFileError(f"unknown keys in {name!r}: {extra}")
    vals = dict(raw)
    for p in paths:
        if vals.get(p) is not None:
            vals[p] = (base / vals[p]) if base is not None else Path(vals[p])
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"section {name!r}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Read a config file; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigFileError("config root must be a mapping")
    return config_from_dict(raw, path.parent)


def config_from_dict(raw: dict, base: Path = Path(".")) -> PipelineConfig:
    top = {"data", "llm", "synthesis", "train", "variants", "seeds", "n_list", "heatmap_users", "output_dir"}
    extra = sorted(set(raw) - top)
    if extra:
        raise ConfigFileError(f"unknown top-level keys: {extra}")
    out = raw.get("output_dir", "ldmi_out")
    return PipelineConfig(
        data=_section(DataSection, raw.get("data"), "data", base, ("input",)),
        llm=_section(LLMSection, raw.get("llm"), "llm", base, ("cache_dir",)),
        synthesis=_section(SynthesisSection, raw.get("synthesis"), "synthesis"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        variants=list(raw.get("variants", ["full"])),
        seeds=[int(s) for s in raw.get("seeds", [0])],
        n_list=[int(n) for n in raw.get("n_list", [20, 50])],
        heatmap_users=int(raw.get("heatmap_users", 3)),
        output_dir=base / out,
    )
