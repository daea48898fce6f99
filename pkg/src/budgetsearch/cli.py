"""Command-line entry point: index, run, stats, export, replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .backends import BackendError, CorruptLog, ScriptedBackend, record_replay
from .datasets import SchemaError, dataset_hash, load_dataset
from .grading import LLMJudge
from .runner import (
    EXIT_CONFIG,
    EXIT_ENV,
    EXIT_OK,
    EXIT_PARTIAL,
    PRESETS,
    ConfigError,
    EnvironmentProblem,
    ExperimentConfig,
    ensure_index,
    expand_grid,
    load_config_file,
    make_embedder,
    run_experiment,
)
from .retrieval import IndexCorrupt, SearchMode
from .tables import AmbiguousCell, ablation_table, grid_table, load_run, render_text, summary_table, write_tables
from .telemetry import NoGradedSamples, PriceSheet, SampleSetMismatch, export_records

log = logging.getLogger("budgetsearch")

# flag name -> ExperimentConfig field; list-valued flags feed grid expansion
_RUN_FLAGS = {
    "dataset": str, "dataset_format": str, "collection": str, "evidence_dir": str, "index_dir": str,
    "embedder": str, "reranker": str, "backend": str, "model": str, "judge": str, "judge_model": str,
    "output_dir": str, "price_sheet": str, "clock": str, "name": str,
    "n_samples": int, "seed": int, "concurrency": int, "max_turns": int, "reflection_interval": int,
    "temperature": float,
}
_GRID_FLAGS = {"mode": str, "max_searches": str, "max_total_tokens": int}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on", "y"):
        return True
    if low in ("0", "false", "no", "off", "n"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="budgetsearch", description="Budget-constrained agentic search experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ix = sub.add_parser("index", help="build or verify a collection index")
    ix.add_argument("--dataset", required=True)
    ix.add_argument("--format", dest="dataset_format", default="jsonl")
    ix.add_argument("--collection")
    ix.add_argument("--evidence-dir")
    ix.add_argument("--index-dir", default="index")
    ix.add_argument("--embedder", default="hash")
    ix.add_argument("--rebuild", action="store_true")

    run = sub.add_parser("run", help="run one configuration or a grid; resumes completed samples")
    run.add_argument("--config", help="TOML or JSON experiment file")
    run.add_argument("--grid", choices=sorted(PRESETS), help="named budget grid")
    for name, typ in _RUN_FLAGS.items():
        run.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    run.add_argument("--format", dest="dataset_format", type=str)
    for name, typ in _GRID_FLAGS.items():
        run.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, nargs="+")
    for name in ("preplan", "reflection"):
        run.add_argument(f"--{name}", dest=name, type=_bool, nargs="+")
    run.add_argument("--rerank-fallback", dest="rerank_fallback", type=_bool)

    st = sub.add_parser("stats", help="summary, budget-grid and ablation tables over run directories")
    st.add_argument("runs", nargs="+")
    st.add_argument("--out", help="directory for .csv/.txt tables")
    st.add_argument("--mode", help="only include runs in this retrieval mode for the budget grid")

    ex = sub.add_parser("export", help="export a run's records as csv or jsonl")
    ex.add_argument("run")
    ex.add_argument("--out", required=True)
    ex.add_argument("--format", choices=["csv", "jsonl"])
    ex.add_argument("--price-sheet", help="recompute costs under this price sheet")

    rp = sub.add_parser("replay", help="re-execute a live run offline from its call log")
    rp.add_argument("run")
    rp.add_argument("--output-dir", required=True)
    return p


# --------------------------------------------------------------------------- commands


def cmd_index(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.dataset, args.dataset_format, collection=args.collection,
                            evidence_dir=args.evidence_dir)
    corpus = ensure_index(manifest, args.index_dir, make_embedder(args.embedder), rebuild=args.rebuild)
    print(json.dumps({
        "collection": corpus.collection,
        "documents": len(manifest.documents),
        "chunks": corpus.stats.n_chunks,
        "avg_chunk_tokens": round(corpus.stats.avg_len, 3),
        "vocabulary": len(corpus.stats.doc_freq),
        "dataset_digest": dataset_hash(manifest.samples),
        "index_digest": corpus.digest(),
        "path": str(Path(args.index_dir) / corpus.collection),
    }, indent=2))
    return EXIT_OK


def run_configs(args: argparse.Namespace) -> list[ExperimentConfig]:
    raw: dict = load_config_file(args.config) if args.config else {}
    if args.grid:
        raw["grid"] = args.grid
    for name in [*_RUN_FLAGS, *_GRID_FLAGS, "preplan", "reflection", "rerank_fallback"]:
        value = getattr(args, name, None)
        if value is None:
            continue
        if isinstance(value, list) and len(value) == 1:
            value = value[0]
        raw[name] = value
    if "dataset" not in raw:
        raise ConfigError("dataset is required (flag or config file)")
    return expand_grid(raw)


def cmd_run(args: argparse.Namespace) -> int:
    configs = run_configs(args)
    code = EXIT_OK
    for cfg in configs:
        result = run_experiment(cfg)
        s = result.summary
        if s is None:
            print(f"{cfg.slug}: no graded samples ({len(result.records)} records)  -> {result.run_dir}")
        else:
            print(f"{cfg.slug}: accuracy {s.accuracy:.2f}% [{s.wilson_low:.2f}, {s.wilson_high:.2f}] "
                  f"n={s.n_graded} ungraded={s.n_ungraded} cost={s.total_cost}  -> {result.run_dir}")
        code = max(code, result.exit_code)
    return code


def cmd_stats(args: argparse.Namespace) -> int:
    runs = [load_run(path) for path in args.runs]
    grid_runs = [r for r in runs if args.mode is None or r.mode == SearchMode.parse(args.mode).value]
    if args.out:
        write_tables(runs, args.out, grid_runs)
    print(render_text(*summary_table(runs)))
    print(render_text(*grid_table(grid_runs)))
    header, rows, _, _ = ablation_table(runs)
    print(render_text(header, rows), end="")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    records = run.records
    if args.price_sheet:
        prices = PriceSheet.load(args.price_sheet)
        records = [r.recost(prices) for r in records]
    path = export_records(records, args.out, args.format)
    print(f"wrote {len(records)} records to {path}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    """Reproduce a run from its recorded model and judge calls without network access."""
    src = Path(args.run)
    meta = json.loads((src / "config.json").read_text(encoding="utf-8"))
    raw = dict(meta["config"])
    cfg = ExperimentConfig(**{**raw, "output_dir": args.output_dir}).validate()
    calls, judge_calls = src / "calls.jsonl", src / "judge_calls.jsonl"
    if not calls.exists():
        raise EnvironmentProblem(f"{calls} not found; only live runs can be replayed")

    def session(sample_id: str) -> str:
        return f"{meta['config_id']}|{sample_id}"

    def backend_factory(sample):
        return ScriptedBackend(record_replay(calls, session(sample.sample_id)), backend_id=f"replay:{cfg.model}")

    judge = None
    if judge_calls.exists():
        judge = LLMJudge(lambda s: ScriptedBackend(record_replay(judge_calls, s), backend_id="replay-judge"))
    result = run_experiment(replace(cfg, clock="logical"), backend_factory=backend_factory, judge=judge,
                            session_prefix=meta["config_id"])
    original = {r.sample_id: r for r in load_run(src).records}
    mismatched = [r.sample_id for r in result.records
                  if r.sample_id in original and (r.answer, r.tokens_out, r.searches_used) !=
                  (original[r.sample_id].answer, original[r.sample_id].tokens_out, original[r.sample_id].searches_used)]
    print(f"replayed {len(result.records)} samples into {result.run_dir}; {len(mismatched)} differ")
    for sid in mismatched:
        print(f"  differs: {sid}")
    return EXIT_PARTIAL if mismatched else result.exit_code


COMMANDS = {"index": cmd_index, "run": cmd_run, "stats": cmd_stats, "export": cmd_export, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SchemaError, AmbiguousCell, SampleSetMismatch, NoGradedSamples) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; rerun the same command to resume", file=sys.stderr)
        return EXIT_PARTIAL
    except (EnvironmentProblem, BackendError, IndexCorrupt, CorruptLog, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
