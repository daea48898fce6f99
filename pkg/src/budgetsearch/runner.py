"""Experiment configuration, grid expansion, and the resumable batch runner."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

from .backends import (
    BackendError,
    CallLog,
    HttpBackend,
    ModelBackend,
    ScriptedBackend,
    ScriptedTrace,
    load_trace_file,
)
from .budget import UNLIMITED, BudgetConfig, SearchCap, parse_search_cap
from .datasets import DatasetManifest, Sample, dataset_hash, load_dataset, select_eval_set
from .engine import EngineConfig, TrajectoryState, run_trajectory
from .grading import ExactMatchJudge, LLMJudge, UnparseableVerdict, Verdict
from .retrieval import HashEmbedder, HttpEmbedder, IndexCorrupt, SearchMode, SearchService, make_reranker
from .retrieval.index import Corpus, build_corpus, load_corpus, save_corpus
from .telemetry import NoGradedSamples, PriceSheet, QuestionRecord, RunSummary, TelemetryLog, aggregate, record

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_ENV = 0, 2, 3, 4

GRID_KEYS = ("mode", "max_searches", "max_total_tokens", "preplan", "reflection")

# Named grids: each entry is a set of overrides applied to the base config.
PRESETS: dict[str, list[dict]] = {
    "ablation": [
        {"mode": "BM25", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": False, "reflection": False},
        {"mode": "BM25", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": True, "reflection": False},
        {"mode": "BM25", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": False, "reflection": True},
        {"mode": "BM25", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": True, "reflection": True},
        {"mode": "HS", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": False, "reflection": False},
        {"mode": "HS_RR", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": False, "reflection": False},
    ],
    "search-scaling": [
        *({"mode": "HS", "max_searches": s, "max_total_tokens": 16000, "preplan": False, "reflection": False}
          for s in (1, 2, 3, "unlimited")),
        {"mode": "HS", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": True, "reflection": False},
        {"mode": "HS", "max_searches": "unlimited", "max_total_tokens": 16000, "preplan": True, "reflection": True},
    ],
    "context-scaling": [
        {"mode": "HS", "max_searches": "unlimited", "max_total_tokens": t, "preplan": False, "reflection": False}
        for t in (500, 1000, 2000, 4000, 16000)
    ],
}


class ConfigError(ValueError):
    pass


class EnvironmentProblem(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    dataset_format: str = "jsonl"
    backend: str = ""
    name: str = "run"
    collection: str | None = None
    evidence_dir: str | None = None
    index_dir: str = "index"
    embedder: str = "hash"
    embedding_dim: int = 64
    reranker: str | None = None
    rerank_fallback: bool = True
    mode: SearchMode = SearchMode.BM25
    max_searches: SearchCap = UNLIMITED
    max_total_tokens: int = 16000
    preplan: bool = False
    reflection: bool = False
    reflection_interval: int = 2
    max_turns: int = 25
    model: str = "model"
    judge: str = "exact"
    judge_model: str | None = None
    n_samples: int | None = None
    seed: int = 0
    temperature: float = 0.0
    concurrency: int = 4
    output_dir: str = "runs"
    price_sheet: str | None = None
    clock: str = "auto"

    def validate(self) -> ExperimentConfig:
        """Coerce field types and check every constraint before anything runs."""
        try:
            cfg = replace(self, mode=SearchMode.parse(self.mode), max_searches=parse_search_cap(self.max_searches))
            BudgetConfig(cfg.max_searches, int(cfg.max_total_tokens))
            EngineConfig(reflection_interval=cfg.reflection_interval, max_turns=cfg.max_turns)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if not cfg.dataset:
            raise ConfigError("dataset is required")
        if not cfg.backend:
            raise ConfigError("backend is required (scripted:<path> or an http(s) endpoint)")
        if not (cfg.backend.startswith("scripted:") or cfg.backend.startswith(("http://", "https://"))):
            raise ConfigError(f"unrecognised backend spec {cfg.backend!r}")
        if not (cfg.judge == "exact" or cfg.judge.startswith("scripted:") or cfg.judge.startswith(("http://", "https://"))):
            raise ConfigError(f"unrecognised judge spec {cfg.judge!r}")
        if cfg.mode is SearchMode.HS_RR and not cfg.reranker:
            raise ConfigError("mode HS_RR needs a reranker")
        if cfg.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if cfg.n_samples is not None and cfg.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if cfg.clock not in ("auto", "wall", "logical"):
            raise ConfigError("clock must be auto, wall or logical")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = SearchMode.parse(self.mode).value
        d["max_searches"] = "unlimited" if self.max_searches is UNLIMITED else self.max_searches
        return d

    @property
    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def slug(self) -> str:
        s = "inf" if self.max_searches is UNLIMITED else str(self.max_searches)
        parts = [self.name, SearchMode.parse(self.mode).value, f"s{s}", f"t{self.max_total_tokens}"]
        if self.preplan:
            parts.append("plan")
        if self.reflection:
            parts.append("rf")
        return "_".join(parts)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.slug}_{self.config_id[:8]}"

    @property
    def budget(self) -> BudgetConfig:
        return BudgetConfig(parse_search_cap(self.max_searches), self.max_total_tokens)

    def engine_config(self) -> EngineConfig:
        return EngineConfig(budget=self.budget, preplan_enabled=self.preplan, reflection_enabled=self.reflection,
                            reflection_interval=self.reflection_interval, max_turns=self.max_turns,
                            temperature=self.temperature, seed=self.seed)

    @property
    def logical_clock(self) -> bool:
        return self.clock == "logical" or (self.clock == "auto" and self.backend.startswith("scripted:"))


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def _toml_load(path: Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with path.open("rb") as fh:
        return tomllib.load(fh)


def load_config_file(path: str | Path) -> dict:
    """Read a TOML (or JSON) experiment file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text()) if path.suffix == ".json" else _toml_load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key in ("dataset", "evidence_dir", "index_dir", "output_dir", "price_sheet"):
        if isinstance(raw.get(key), str) and not Path(raw[key]).is_absolute():
            raw[key] = str((path.parent / raw[key]).resolve())
    for key in ("backend", "judge"):
        value = raw.get(key)
        if isinstance(value, str) and value.startswith("scripted:") and not Path(value[9:]).is_absolute():
            raw[key] = "scripted:" + str((path.parent / value[9:]).resolve())
    return raw


def expand_grid(raw: dict) -> list[ExperimentConfig]:
    """Build configs from a mapping; list values under GRID_KEYS and ``grid = "<preset>"`` expand."""
    raw = dict(raw)
    preset = raw.pop("grid", None)
    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    variants: list[dict] = [{}]
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown grid preset {preset!r}; choose from {sorted(PRESETS)}")
        variants = [dict(v) for v in PRESETS[preset]]
    axes = [(k, raw.pop(k)) for k in GRID_KEYS if isinstance(raw.get(k), list)]
    if axes:
        keys = [k for k, _ in axes]
        combos = [dict(zip(keys, values)) for values in itertools.product(*(v for _, v in axes))]
        variants = [{**v, **c} for v in variants for c in combos]
    configs = []
    for v in variants:
        try:
            cfg = ExperimentConfig(**{**raw, **v})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        configs.append(cfg.validate())
    ids = [c.config_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ConfigError("grid produced duplicate configurations")
    return configs


# --------------------------------------------------------------------------- services


def make_embedder(spec: str, dim: int = 64):
    if spec == "hash":
        return HashEmbedder(dim)
    if spec.startswith(("http://", "https://")):
        return HttpEmbedder(spec, dim)
    raise ConfigError(f"unknown embedder {spec!r}")


def ensure_index(manifest: DatasetManifest, index_dir: str | Path, embedder=None, rebuild: bool = False) -> Corpus:
    """Load the persisted collection, rebuilding it if missing, stale or corrupt."""
    want = embedder.embedder_id if embedder is not None else None
    if not rebuild:
        try:
            corpus = load_corpus(index_dir, manifest.collection, want)
            fresh = build_corpus(manifest.collection, manifest.documents)
            if corpus.chunks == fresh.chunks and (want is None or corpus.embeddings is not None):
                return corpus
            log.info("index for %s is stale; rebuilding", manifest.collection)
        except IndexCorrupt as exc:
            log.warning("rebuilding index for %s: %s", manifest.collection, exc)
    corpus = build_corpus(manifest.collection, manifest.documents, embedder)
    save_corpus(corpus, index_dir)
    return corpus


def _iso(ts: float) -> str:
    return (datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=ts)).isoformat()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunResult:
    config: ExperimentConfig
    run_dir: Path
    records: list[QuestionRecord]
    summary: RunSummary | None
    exit_code: int
    dataset_digest: str
    skipped: int = 0


BackendFactory = Callable[[Sample], ModelBackend]


def _trace_factory(path: str, role: str, backend_id: str) -> Callable[[str], ModelBackend]:
    traces = load_trace_file(path)[role]

    def factory(sample_id: str) -> ModelBackend:
        return ScriptedBackend(traces.get(sample_id, ScriptedTrace()), backend_id=backend_id)

    return factory


def _model_factory(cfg: ExperimentConfig, run_dir: Path) -> BackendFactory:
    if cfg.backend.startswith("scripted:"):
        factory = _trace_factory(cfg.backend[len("scripted:"):], "model", f"scripted:{cfg.model}")
        return lambda sample: factory(sample.sample_id)
    shared = HttpBackend(cfg.backend, cfg.model, call_log=CallLog(run_dir / "calls.jsonl"))
    if not shared.api_key:
        raise EnvironmentProblem("BCAS_API_KEY is not set")
    return lambda sample: shared


def _judge(cfg: ExperimentConfig, run_dir: Path):
    if cfg.judge == "exact":
        return ExactMatchJudge()
    if cfg.judge.startswith("scripted:"):
        factory = _trace_factory(cfg.judge[len("scripted:"):], "judge", "scripted-judge")
        return LLMJudge(lambda session: factory(session.split("|", 1)[1]))
    shared = HttpBackend(cfg.judge, cfg.judge_model or "judge", call_log=CallLog(run_dir / "judge_calls.jsonl"))
    return LLMJudge(lambda session: shared)


def run_one(sample: Sample, index: int, cfg: ExperimentConfig, backend: ModelBackend, searcher, judge,
            prices: PriceSheet, digest: str, session_prefix: str | None = None) -> tuple[QuestionRecord, TrajectoryState]:
    # sessions key backend call logs; replays pass the original run's prefix
    session = f"{session_prefix or cfg.config_id}|{sample.sample_id}"
    started = _iso(index * 1000.0) if cfg.logical_clock else _now()
    state = run_trajectory(sample.question, cfg.engine_config(), backend, searcher, session=session)
    verdict, grade_error = None, None
    if state.outcome.kind == "failed" and state.outcome.reason == "backend":
        grade_error = "not graded: backend failure"
    elif state.outcome.kind == "failed":
        verdict = Verdict(False, "engine", f"trajectory failed: {state.outcome.reason}")
    else:
        try:
            verdict = judge.grade(sample.question, sample.reference_answer, state.outcome.answer, session=session)
        except UnparseableVerdict as exc:
            grade_error = f"unparseable verdict: {exc}"
        except BackendError as exc:
            grade_error = f"judge unavailable: {exc}"
    finished = _iso(index * 1000.0 + len(state.calls)) if cfg.logical_clock else _now()
    rec = record(state, verdict, prices, sample_id=sample.sample_id, config_id=cfg.config_id, dataset_digest=digest,
                 model=cfg.model, mode=SearchMode.parse(cfg.mode).value, grade_error=grade_error,
                 started_at=started, finished_at=finished)
    return rec, state


def _transcript(rec: QuestionRecord, state: TrajectoryState) -> str:
    return json.dumps({
        "sample_id": rec.sample_id, "config_id": rec.config_id, "question": state.question, "plan": state.plan,
        "turns": [t.to_dict() for t in state.turns],
        "reflections": [{"after_turn": a, "text": t} for a, t in state.reflections],
        "outcome": rec.outcome, "answer": rec.answer,
    }, ensure_ascii=False, sort_keys=True)


def run_experiment(
    cfg: ExperimentConfig,
    backend_factory: BackendFactory | None = None,
    judge=None,
    service: SearchService | None = None,
    session_prefix: str | None = None,
) -> RunResult:
    """Run (or resume) one configuration and write telemetry plus summary to its run directory."""
    cfg = cfg.validate()
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_dataset(cfg.dataset, cfg.dataset_format, collection=cfg.collection, evidence_dir=cfg.evidence_dir)
    samples = select_eval_set(manifest, cfg.n_samples, cfg.seed)
    digest = dataset_hash(samples)
    prices = PriceSheet.load(cfg.price_sheet)

    if service is None:
        embedder = make_embedder(cfg.embedder, cfg.embedding_dim) if cfg.mode is not SearchMode.BM25 else None
        corpus = ensure_index(manifest, cfg.index_dir, embedder)
        service = SearchService({manifest.collection: corpus}, embedder, make_reranker(cfg.reranker),
                                rerank_fallback=cfg.rerank_fallback)
    searcher = service.bind(manifest.collection, cfg.mode)
    backend_factory = backend_factory or _model_factory(cfg, run_dir)
    judge = judge or _judge(cfg, run_dir)

    (run_dir / "config.json").write_text(json.dumps(
        {"config_id": cfg.config_id, "dataset_name": manifest.name, "dataset_digest": digest,
         "n_samples": len(samples), "config": cfg.to_dict()},
        indent=2, sort_keys=True), encoding="utf-8")

    telemetry = TelemetryLog(run_dir / "telemetry.jsonl")
    transcripts = run_dir / "transcripts.jsonl"
    done = {key for key, r in telemetry.load().items()
            if not (r.outcome == "failed" and r.outcome_reason == "backend")}
    pending = [(i, s) for i, s in enumerate(samples) if (s.sample_id, cfg.config_id) not in done]
    log.info("%s: %d samples, %d already done", cfg.slug, len(samples), len(samples) - len(pending))

    write_lock = threading.Lock()

    def work(item: tuple[int, Sample]) -> None:
        i, sample = item
        rec, state = run_one(sample, i, cfg, backend_factory(sample), searcher, judge, prices, digest,
                             session_prefix)
        telemetry.append(rec)
        with write_lock, transcripts.open("a", encoding="utf-8") as fh:
            fh.write(_transcript(rec, state) + "\n")

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        futures = [pool.submit(work, item) for item in pending]
        try:
            for fut in futures:
                fut.result()
        except BaseException:
            for fut in futures:
                fut.cancel()
            raise

    records = telemetry.compact([s.sample_id for s in samples])
    records = [r for r in records if r.config_id == cfg.config_id]
    try:
        summary = aggregate(records)
        (run_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    except NoGradedSamples:
        summary = None
    failed = sum(r.outcome == "failed" and r.outcome_reason == "backend" for r in records)
    code = EXIT_PARTIAL if failed or summary is None else EXIT_OK
    return RunResult(cfg, run_dir, records, summary, code, digest, skipped=len(samples) - len(pending))
