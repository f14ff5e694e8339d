"""Command-line pipeline: ingest, analyze, synthesize, train, evaluate, report.

Stages communicate only through files under the configured output directory.
Exit codes: 0 success, 2 usage error or missing input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from . import synthesis as syn
from .config import ConfigFileError, PipelineConfig, load_config
from .data import (
    apply_k_core,
    build_log,
    parse_interactions,
    read_canonical_log,
    read_interactions,
    read_split_manifest,
    split_chronological,
    write_canonical_log,
    write_split_manifest,
)
from .llm_interest import (
    BudgetExhausted,
    CacheMiss,
    ConfigError,
    LLMClient,
    LLMError,
    SemanticClustering,
    analyze,
    dump_clusterings,
    read_clusterings,
)
from .model import load_checkpoint, save_checkpoint
from .pipeline import synthesize, visible_log
from .train_eval import (
    TrainingDiverged,
    contrastive_units,
    evaluate,
    interest_heatmap,
    mean_row_correlation,
    popularity_baseline,
    train,
    write_trace,
)

logger = logging.getLogger("ldmi")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# variants that need their own synthesized users
SYNTH_KEY = {"full": "main", "no_sem": "main", "no_col": "main", "no_com": "wocom", "no_rep": "worep"}


class StageError(Exception):
    """A command cannot start; carries the exit code."""

    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class Layout:
    root: Path

    @property
    def log(self) -> Path:
        return self.root / "ingest" / "log.tsv"

    @property
    def splits(self) -> Path:
        return self.root / "ingest" / "splits.tsv"

    @property
    def individual(self) -> Path:
        return self.root / "analysis" / "individual.jsonl"

    def synth_dir(self, key: str) -> Path:
        return self.root / "synth" / key

    def run_dir(self, variant: str, seed: int) -> Path:
        return self.root / "runs" / f"{variant}-s{seed}"

    @property
    def popularity(self) -> Path:
        return self.root / "runs" / "popularity"

    @property
    def report(self) -> Path:
        return self.root / "report"


def _atomic_write(path: Path, write: Callable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}: run the '{stage}' stage first")
    return path


def _load_ingest(lay: Layout):
    log = read_canonical_log(_require(lay.log, "ingest"))
    return log, read_split_manifest(_require(lay.splits, "ingest"), log)


def _synth_keys(cfg: PipelineConfig) -> list[str]:
    if cfg.train.lam <= 0:
        return []
    return sorted({SYNTH_KEY[v] for v in cfg.variants})


# -- commands -------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, args) -> int:
    src = cfg.data.input
    if src is None or not Path(src).exists():
        raise StageError(f"input file not found: {src}")
    if cfg.data.format == "auto":
        report = read_interactions(src)
    else:
        with open(src, encoding="utf-8", newline="") as fh:
            report = parse_interactions(fh, cfg.data.format)
    events = apply_k_core(report.events, cfg.data.k_core, cfg.data.k_core_mode)
    if not events:
        raise StageError(f"no interactions survive {cfg.data.k_core}-core filtering", EXIT_RUNTIME)
    log = build_log(events)
    splits = split_chronological(log, cfg.data.max_len)
    lay = Layout(cfg.output_dir)
    _atomic_write(lay.log, lambda fh: write_canonical_log(log, fh))
    _atomic_write(lay.splits, lambda fh: write_split_manifest(splits, fh))
    print(f"ingested {log.n_users} users, {log.n_items} items, {log.n_interactions} interactions "
          f"({report.malformed} malformed lines skipped)")
    return EXIT_OK


def _analysis_jobs(cfg: PipelineConfig, lay: Layout, level: str):
    """(output path, {owner: titles}) pairs for one analysis level."""
    log, splits = _load_ingest(lay)
    if level == "individual":
        owners = {s.user: [log.titles[i] for i in s.prefix] for s in splits.users if s.prefix}
        return [(lay.individual, owners)]
    jobs = []
    keys = _synth_keys(cfg) or ["main"]
    for key in keys:
        d = lay.synth_dir(key)
        cliques = syn.read_cliques(_require(d / "cliques.jsonl", "synthesize"))
        sel = syn.read_selection(_require(d / "selection.txt", "synthesize"), len(cliques))
        owners = {r: [log.titles[i] for i in cliques[r].behavior_union] for r in sel.chosen}
        jobs.append((d / "crowd.jsonl", owners))
    return jobs


def cmd_analyze(cfg: PipelineConfig, args, transport: httpx.BaseTransport | None = None) -> int:
    lay = Layout(cfg.output_dir)
    mock = cfg.llm.mock or args.mock
    client_cfg = cfg.client_config()
    if args.offline:
        client_cfg.offline = True
    if args.budget is not None:
        client_cfg.max_calls = args.budget
    client = None if mock else LLMClient(client_cfg, transport=transport)
    status = EXIT_OK
    try:
        for path, owners in _analysis_jobs(cfg, lay, args.level):
            done = read_clusterings(path) if path.exists() else {}
            done = {o: c for o, c in done.items() if o in owners}
            todo = sorted(o for o in owners if o not in done)
            failures: list[tuple[int, Exception]] = []

            def one(owner: int):
                try:
                    return owner, analyze(owners[owner], owner, client)
                except (BudgetExhausted, CacheMiss, LLMError, ConfigError) as exc:
                    return owner, exc

            workers = 1 if client is None else max(1, client_cfg.max_concurrency)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for owner, res in pool.map(one, todo):
                    if isinstance(res, SemanticClustering):
                        done[owner] = res
                    else:
                        failures.append((owner, res))
            records = [done[o] for o in sorted(done)]
            _atomic_write(path, lambda fh: dump_clusterings(records, fh))
            print(f"{path}: {len(records)}/{len(owners)} owners analyzed")
            if failures:
                first = failures[0][1]
                if isinstance(first, ConfigError):
                    raise StageError(str(first))
                print(f"{len(failures)} owner(s) not analyzed ({type(first).__name__}: {first}); "
                      f"re-run 'ldmi analyze --level {args.level}' to resume", file=sys.stderr)
                status = EXIT_RUNTIME
                break
    finally:
        if client is not None:
            client.close()
            print(f"LLM calls: {client.calls}")
    return status


def cmd_synthesize(cfg: PipelineConfig, args) -> int:
    lay = Layout(cfg.output_dir)
    log, splits = _load_ingest(lay)
    vis = visible_log(log, splits)
    seed = cfg.seeds[0]
    for key in _synth_keys(cfg) or ["main"]:
        s = synthesize(vis, cfg.synthesis.G, cfg.synthesis.Z, cfg.synthesis.metric,
                       no_com=key == "wocom", no_rep=key == "worep", seed=seed)
        d = lay.synth_dir(key)
        d.mkdir(parents=True, exist_ok=True)
        syn.write_cliques(s.cliques, d / "cliques.jsonl")
        syn.write_instance(s.instance, d / "instance.txt")
        syn.write_selection(s.selection, d / "selection.txt")
        print(f"{d}: {s.instance.n_rows} synthesized users, selected {len(s.selection.chosen)}, "
              f"covered value {s.selection.covered_value:.4f}")
    return EXIT_OK


def _individual(lay: Layout, variant: str) -> dict[int, SemanticClustering]:
    if variant == "no_sem":
        return {}
    return read_clusterings(_require(lay.individual, "analyze --level individual"))


def _selected_variants(cfg: PipelineConfig, args) -> list[str]:
    if getattr(args, "variant", None):
        if args.variant not in cfg.variants:
            raise StageError(f"variant {args.variant!r} not in config variants {cfg.variants}")
        return [args.variant]
    return list(cfg.variants)


def cmd_train(cfg: PipelineConfig, args) -> int:
    lay = Layout(cfg.output_dir)
    log, splits = _load_ingest(lay)
    for variant in _selected_variants(cfg, args):
        individual = _individual(lay, variant)
        units = []
        if cfg.train.lam > 0:
            d = lay.synth_dir(SYNTH_KEY[variant])
            cliques = syn.read_cliques(_require(d / "cliques.jsonl", "synthesize"))
            crowd = read_clusterings(_require(d / "crowd.jsonl", "analyze --level crowd"))
            units = contrastive_units({r: cliques[r].behavior_union for r in crowd}, crowd)
        for seed in cfg.seeds:
            tc = cfg.train_config(variant, seed)
            result = train(tc, splits, log.n_items, individual, units)
            out = lay.run_dir(variant, seed)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(result.params, out / "checkpoint.bin")
            write_trace(result.trace, out / "trace.jsonl")
            info = {"variant": variant, "seed": seed, "config": asdict(tc), "iterations": result.iterations,
                    "cst_updates": result.cst_updates, "epochs_run": result.epochs_run,
                    "best_valid_recall": result.best_valid_recall}
            (out / "train.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            print(f"{out.name}: {result.iterations} iterations, {result.cst_updates} contrastive updates, "
                  f"best valid R@20 {result.best_valid_recall:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    lay = Layout(cfg.output_dir)
    log, splits = _load_ingest(lay)
    n_list = tuple(cfg.n_list)
    for variant in _selected_variants(cfg, args):
        individual = _individual(lay, variant)
        for seed in cfg.seeds:
            d = lay.run_dir(variant, seed)
            params = load_checkpoint(_require(d / "checkpoint.bin", "train"))
            metrics = evaluate(params, splits, individual, n_list=n_list, seed=seed)
            info = json.loads((d / "train.json").read_text(encoding="utf-8"))
            metrics.cst_updates = info["cst_updates"]
            metrics.write(d / "metrics", f"{variant}-s{seed}")
            print(metrics.table(d.name))
    pop = popularity_baseline(splits, log.n_items, n_list)
    lay.popularity.mkdir(parents=True, exist_ok=True)
    pop.write(lay.popularity / "metrics", "popularity")
    print(pop.table("popularity"))
    return EXIT_OK


def _collect_runs(lay: Layout) -> dict[str, list[dict]]:
    runs: dict[str, list[dict]] = {}
    for p in sorted((lay.root / "runs").glob("*/metrics.json")):
        rec = json.loads(p.read_text(encoding="utf-8"))
        name = p.parent.name
        variant = name.rsplit("-s", 1)[0] if name != "popularity" else name
        runs.setdefault(variant, []).append(rec)
    return runs


def render_table(runs: dict[str, list[dict]]) -> str:
    """Mean metrics per variant over seeds; with a popularity row and more than
    one row, a column gives each row's relative R@20 change against it."""
    order = [v for v in ("full", "no_sem", "no_col", "no_com", "no_rep") if v in runs]
    order += sorted(v for v in runs if v not in order and v != "popularity")
    if "popularity" in runs:
        order.append("popularity")
    first = runs[order[0]][0]["means"]
    cols = sorted(first, key=lambda c: (int(c.split("@")[1]), "RNH".index(c[0])))
    compare = "popularity" in runs and len(order) > 1
    pop_r = None
    if compare:
        pop_r = float(np.mean([r["means"]["R@20"] for r in runs["popularity"]])) if "R@20" in first else None
        compare = pop_r is not None and pop_r > 0
    head = f"{'variant':<12}{'runs':>5}" + "".join(f"{c:>9}" for c in cols) + (f"{'vs pop':>9}" if compare else "")
    lines = [head]
    for v in order:
        means = {c: float(np.mean([r["means"][c] for r in runs[v]])) for c in cols}
        line = f"{v:<12}{len(runs[v]):>5}" + "".join(f"{means[c]:>9.4f}" for c in cols)
        if compare:
            line += f"{means['R@20'] / pop_r - 1.0:>+9.1%}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_report(cfg: PipelineConfig, args) -> int:
    lay = Layout(cfg.output_dir)
    runs = _collect_runs(lay)
    if not runs:
        raise StageError(f"no metrics under {lay.root / 'runs'}: run the 'evaluate' stage first")
    table = render_table(runs)
    lay.report.mkdir(parents=True, exist_ok=True)
    (lay.report / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    log, splits = _load_ingest(lay)
    users = [s for s in splits.eval_users() if s.prefix][: cfg.heatmap_users]
    hm_dir = lay.report / "heatmaps"
    hm_dir.mkdir(exist_ok=True)
    corr_lines = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            d = lay.run_dir(variant, seed)
            if not (d / "checkpoint.bin").exists():
                continue
            params = load_checkpoint(d / "checkpoint.bin")
            individual = _individual(lay, variant)
            corrs = []
            for s in users:
                grid = interest_heatmap(params, s.prefix, individual.get(s.user), seed=seed, user=s.user)
                np.savetxt(hm_dir / f"{d.name}-u{s.user}.tsv", grid, fmt="%.6f", delimiter="\t")
                corrs.append(mean_row_correlation(grid))
            corr_lines.append(f"{d.name}\t{np.nanmean(corrs) if corrs else float('nan'):.4f}")
    if corr_lines:
        text = "run\tmean_row_correlation\n" + "\n".join(corr_lines) + "\n"
        (lay.report / "heatmap_correlation.tsv").write_text(text, encoding="utf-8")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldmi", description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", required=True, help="YAML pipeline configuration")
    p.add_argument("-o", "--output-dir", help="override the configured output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="filter, index and split the raw interactions")
    a = sub.add_parser("analyze", help="cluster titles into interests (LLM or mock)")
    a.add_argument("--level", choices=("individual", "crowd"), required=True)
    mode = a.add_mutually_exclusive_group()
    mode.add_argument("--mock", action="store_true", help="use the offline token-overlap clusterer")
    mode.add_argument("--offline", action="store_true", help="serve from the response cache only")
    a.add_argument("--budget", type=int, help="maximum number of new LLM calls")
    sub.add_parser("synthesize", help="build synthesized users and select representatives")
    for name, text in (("train", "train each configured variant"), ("evaluate", "score checkpoints")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--variant", help="restrict to one configured variant")
    sub.add_parser("report", help="comparison table and interest heatmaps")
    return p


def main(argv: Sequence[str] | None = None, transport: httpx.BaseTransport | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not Path(args.config).exists():
            raise StageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = replace(cfg, output_dir=Path(args.output_dir))
        if args.command == "analyze":
            return cmd_analyze(cfg, args, transport)
        return COMMANDS[args.command](cfg, args)
    except (StageError, ConfigFileError) as exc:
        print(f"ldmi {args.command}: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_USAGE)
    except (LLMError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"ldmi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


COMMANDS = {
    "ingest": cmd_ingest,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

if __name__ == "__main__":
    sys.exit(main())
