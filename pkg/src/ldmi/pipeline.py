"""In-memory orchestration of the stages: analysis, synthesis, training and evaluation.

Both LLM stages and synthesis see only each user's train + validation prefix,
never the test span.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import synthesis as syn
from .data import InteractionLog, SplitSequences
from .llm_interest import LLMClient, SemanticClustering, analyze
from .train_eval import (
    MetricsReport,
    TrainConfig,
    TrainResult,
    contrastive_units,
    evaluate,
    popularity_baseline,
    train,
)

logger = logging.getLogger(__name__)


def visible_log(log: InteractionLog, splits: SplitSequences) -> InteractionLog:
    """The log restricted to each user's train + validation prefix."""
    seqs, stamps = [], []
    for s in splits.users:
        n = len(s.prefix)
        seqs.append(list(s.prefix))
        stamps.append(log.timestamps[s.user][s.start : s.start + n])
    return InteractionLog(log.user_keys, log.item_keys, log.titles, seqs, stamps)


def individual_clusterings(log: InteractionLog, splits: SplitSequences,
                           client: LLMClient | None = None) -> dict[int, SemanticClustering]:
    out = {}
    for s in splits.users:
        if s.prefix:
            out[s.user] = analyze([log.titles[i] for i in s.prefix], s.user, client)
    return out


@dataclass
class Synthesis:
    cliques: list[syn.Clique]
    instance: syn.CoverageInstance
    selection: syn.Selection


def synthesize(log: InteractionLog, G: int = 5, Z: int | None = None, metric: str = "overlap",
               no_com: bool = False, no_rep: bool = False, seed: int = 0) -> Synthesis:
    """Cliques (or random item sets under ``no_com``) and the representative subset."""
    rng = np.random.default_rng([seed, 104729])
    cliques = syn.random_cliques(log, rng) if no_com else syn.build_cliques(log, G, metric)
    Z = Z or syn.default_budget(log.n_users)
    instance = syn.coverage_instance(cliques, syn.item_values(log), min(Z, len(cliques)))
    if no_rep:
        selection = syn.random_selection(instance, rng)
    else:
        selection = syn.solve_mcp_greedy(instance)
    return Synthesis(cliques, instance, selection)


def crowd_clusterings(log: InteractionLog, synth: Synthesis,
                      client: LLMClient | None = None) -> dict[int, SemanticClustering]:
    out = {}
    for row in synth.selection.chosen:
        items = synth.cliques[row].behavior_union
        out[row] = analyze([log.titles[i] for i in items], row, client)
    return out


@dataclass
class Experiment:
    config: TrainConfig
    result: TrainResult
    metrics: MetricsReport
    synth: Synthesis | None = None
    extras: dict = field(default_factory=dict)


def run_experiment(log: InteractionLog, splits: SplitSequences, config: TrainConfig,
                   individual: Mapping[int, SemanticClustering] | None = None,
                   client: LLMClient | None = None, valid: bool = True) -> Experiment:
    """Analyze (mock when ``client`` is None), synthesize, train and evaluate one variant."""
    vis = visible_log(log, splits)
    if individual is None:
        individual = individual_clusterings(log, splits, client)
    synth = None
    units = []
    if config.lam > 0:
        synth = synthesize(vis, config.G, config.Z, no_com=config.no_com, no_rep=config.no_rep, seed=config.seed)
        crowd = crowd_clusterings(log, synth, client)
        units = contrastive_units({r: synth.cliques[r].behavior_union for r in crowd}, crowd)
    use_individual = {} if config.no_sem else individual
    result = train(config, splits, log.n_items, use_individual, units, valid=valid)
    metrics = evaluate(result.params, splits, use_individual, seed=config.seed)
    metrics.cst_updates = result.cst_updates
    return Experiment(config, result, metrics, synth, {"units": units, "individual": individual})


def ablation_configs(base: TrainConfig, names: Sequence[str] = ("no_sem", "no_col", "no_com", "no_rep")):
    yield base
    for n in names:
        yield replace(base, **{n: True})


def popularity(splits: SplitSequences, n_items: int) -> MetricsReport:
    return popularity_baseline(splits, n_items)
