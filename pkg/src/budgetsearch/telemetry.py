"""Per-question records, the append-only run log, cost accounting and run summaries."""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, fields, replace
from decimal import Decimal, localcontext
from pathlib import Path
from typing import Iterable, Sequence

from .engine import TrajectoryState
from .grading import Verdict
from .stats import Z95, newcombe_paired_interval, wilson_interval

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_MILLION = Decimal(1_000_000)


class NoGradedSamples(ValueError):
    pass


class SampleSetMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PriceSheet:
    """Unit prices: input and output per million tokens, and per search call."""

    input_per_million: Decimal = Decimal(0)
    output_per_million: Decimal = Decimal(0)
    per_search: Decimal = Decimal(0)

    def __post_init__(self) -> None:
        for f in fields(self):
            value = Decimal(str(getattr(self, f.name)))
            if value < 0:
                raise ValueError(f"{f.name} must be >= 0")
            object.__setattr__(self, f.name, value)

    def scaled(self, factor: Decimal | int | str) -> PriceSheet:
        factor = Decimal(str(factor))
        return PriceSheet(self.input_per_million * factor, self.output_per_million * factor, self.per_search * factor)

    def cost(self, tokens_in: int, tokens_out: int, searches: int) -> Decimal:
        with localcontext() as ctx:
            ctx.prec = 60
            return (Decimal(tokens_in) * self.input_per_million / _MILLION
                    + Decimal(tokens_out) * self.output_per_million / _MILLION
                    + Decimal(searches) * self.per_search)

    @classmethod
    def load(cls, path: str | Path | None) -> PriceSheet:
        """Read a TOML or JSON file with keys input_per_million, output_per_million, per_search."""
        if path is None:
            return cls()
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            raw = json.loads(text, parse_float=Decimal)
        else:
            raw = _toml().loads(text, parse_float=Decimal)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown price sheet keys: {sorted(unknown)}")
        return cls(**{k: Decimal(str(v)) for k, v in raw.items()})


def _toml():
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib


@dataclass(frozen=True)
class QuestionRecord:
    sample_id: str
    config_id: str
    dataset_digest: str
    model: str
    mode: str
    searches_used: int
    tokens_in: int
    tokens_out: int
    early_stop: bool
    outcome: str
    outcome_reason: str | None
    answer: str
    verdict: Verdict | None
    cost: Decimal
    grade_error: str | None = None
    retries: int = 0
    rerank_fallbacks: int = 0
    saturated: bool = False
    n_turns: int = 0
    calls: tuple[dict, ...] = ()
    started_at: str = ""
    finished_at: str = ""
    schema_version: int = SCHEMA_VERSION

    @property
    def key(self) -> tuple[str, str]:
        return self.sample_id, self.config_id

    @property
    def graded(self) -> bool:
        return self.verdict is not None

    @property
    def correct(self) -> bool:
        return self.verdict is not None and self.verdict.correct

    def recost(self, prices: PriceSheet) -> QuestionRecord:
        return replace(self, cost=prices.cost(self.tokens_in, self.tokens_out, self.searches_used))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict.to_dict() if self.verdict else None
        d["cost"] = str(self.cost)
        d["calls"] = [dict(c) for c in self.calls]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> QuestionRecord:
        d = dict(d)
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported telemetry schema {d.get('schema_version')}")
        d["verdict"] = Verdict.from_dict(d.get("verdict"))
        d["cost"] = Decimal(str(d["cost"]))
        d["calls"] = tuple(d.get("calls") or ())
        return cls(**d)


def record(trajectory: TrajectoryState, verdict: Verdict | None, prices: PriceSheet, *, sample_id: str,
           config_id: str, dataset_digest: str, model: str, mode: str, grade_error: str | None = None,
           started_at: str = "", finished_at: str = "") -> QuestionRecord:
    if not trajectory.terminal:
        raise ValueError("trajectory has no outcome yet")
    ledger = trajectory.ledger
    outcome = trajectory.outcome
    return QuestionRecord(
        sample_id=sample_id,
        config_id=config_id,
        dataset_digest=dataset_digest,
        model=model,
        mode=mode,
        searches_used=ledger.searches_used,
        tokens_in=ledger.prompt_tokens_used,
        tokens_out=ledger.completion_tokens_used,
        early_stop=trajectory.early_stop,
        outcome=outcome.kind,
        outcome_reason=getattr(outcome, "reason", None),
        answer=outcome.answer,
        verdict=verdict,
        cost=prices.cost(ledger.prompt_tokens_used, ledger.completion_tokens_used, ledger.searches_used),
        grade_error=grade_error,
        retries=trajectory.retries,
        rerank_fallbacks=trajectory.rerank_fallbacks,
        saturated=ledger.saturated,
        n_turns=len(trajectory.turns),
        calls=tuple(c.to_dict() for c in trajectory.calls),
        started_at=started_at,
        finished_at=finished_at,
    )


# --------------------------------------------------------------------------- run log


class TelemetryLog:
    """Append-only JSONL log keyed by (sample_id, config_id).

    Appends go through one lock and are flushed and fsynced, so a crash leaves
    at most a torn final line, which ``load`` drops. The last record for a key
    wins.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def load(self) -> dict[tuple[str, str], QuestionRecord]:
        records: dict[tuple[str, str], QuestionRecord] = {}
        if not self.path.exists():
            return records
        with self.path.open(encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = QuestionRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                if lineno >= len(lines) - 1:
                    log.warning("dropping torn trailing record in %s", self.path)
                    continue
                raise ValueError(f"{self.path}:{lineno}: corrupt telemetry record: {exc}") from exc
            records[rec.key] = rec
        return records

    def _repair_tail(self) -> None:
        if not self.path.exists() or self.path.stat().st_size == 0:
            return
        with self.path.open("rb+") as fh:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) == b"\n":
                return
            fh.seek(0)
            data = fh.read()
            fh.truncate(data.rfind(b"\n") + 1)

    def append(self, rec: QuestionRecord) -> None:
        line = rec.to_json() + "\n"
        with self._lock:
            self._repair_tail()
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def compact(self, order: Sequence[str]) -> list[QuestionRecord]:
        """Rewrite the log deduplicated and in eval-set order (atomically)."""
        with self._lock:
            records = self.load()
            rank = {sid: i for i, sid in enumerate(order)}
            ordered = sorted(records.values(), key=lambda r: (rank.get(r.sample_id, len(rank)), r.sample_id, r.config_id))
            tmp = self.path.with_suffix(".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                for r in ordered:
                    fh.write(r.to_json() + "\n")
            os.replace(tmp, self.path)
            return ordered


# --------------------------------------------------------------------------- summaries


@dataclass(frozen=True)
class RunSummary:
    config_id: str
    n_records: int
    n_graded: int
    n_correct: int
    n_ungraded: int
    n_failed: int
    accuracy: float
    wilson_low: float
    wilson_high: float
    mean_searches: float
    mean_tokens_out: float
    total_cost: Decimal
    dataset_digest: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_cost"] = str(self.total_cost)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunSummary:
        return cls(**{**d, "total_cost": Decimal(str(d["total_cost"]))})


def aggregate(records: Iterable[QuestionRecord], z: float = Z95) -> RunSummary:
    records = list(records)
    graded = [r for r in records if r.graded]
    if not graded:
        raise NoGradedSamples(f"no graded records among {len(records)}")
    config_ids = {r.config_id for r in records}
    digests = {r.dataset_digest for r in records}
    if len(config_ids) != 1:
        raise ValueError(f"records span several configs: {sorted(config_ids)}")
    n, k = len(graded), sum(r.correct for r in graded)
    low, high = wilson_interval(k, n, z)
    total_cost = sum((r.cost for r in records), Decimal(0))
    return RunSummary(
        config_id=config_ids.pop(),
        n_records=len(records),
        n_graded=n,
        n_correct=k,
        n_ungraded=len(records) - n,
        n_failed=sum(r.outcome == "failed" for r in records),
        accuracy=100.0 * k / n,
        wilson_low=100.0 * low,
        wilson_high=100.0 * high,
        mean_searches=sum(r.searches_used for r in records) / len(records),
        mean_tokens_out=sum(r.tokens_out for r in records) / len(records),
        total_cost=total_cost,
        dataset_digest=digests.pop() if len(digests) == 1 else "",
    )


def total_cost(records: Iterable[QuestionRecord], prices: PriceSheet) -> Decimal:
    return sum((prices.cost(r.tokens_in, r.tokens_out, r.searches_used) for r in records), Decimal(0))


def signed(value: float, places: int = 2) -> str:
    rounded = round(value, places)
    if rounded == 0:
        rounded = 0.0  # avoid "-0.00"
    return f"{rounded:+.{places}f}"


@dataclass(frozen=True)
class DeltaReport:
    delta: float  # percentage points
    low: float
    high: float
    n_pairs: int
    baseline_accuracy: float
    variant_accuracy: float

    def formatted(self) -> str:
        return signed(self.delta)

    def to_dict(self) -> dict:
        return asdict(self) | {"formatted": self.formatted()}


def ablation_delta(baseline: RunSummary, variant: RunSummary, baseline_records: Sequence[QuestionRecord],
                   variant_records: Sequence[QuestionRecord], z: float = Z95) -> DeltaReport:
    """Point delta from the two summaries; Newcombe interval over samples graded in both runs."""
    digests = {r.dataset_digest for r in baseline_records} | {r.dataset_digest for r in variant_records}
    if baseline.dataset_digest != variant.dataset_digest or len(digests) != 1:
        raise SampleSetMismatch(f"runs were evaluated on different sample sets: {sorted(digests)}")
    b = {r.sample_id: r.correct for r in baseline_records if r.graded}
    v = {r.sample_id: r.correct for r in variant_records if r.graded}
    shared = sorted(b.keys() & v.keys())
    if not shared:
        raise NoGradedSamples("no sample graded in both runs")
    low, high = newcombe_paired_interval([b[s] for s in shared], [v[s] for s in shared], z)
    return DeltaReport(variant.accuracy - baseline.accuracy, 100.0 * low, 100.0 * high, len(shared),
                       baseline.accuracy, variant.accuracy)


# --------------------------------------------------------------------------- export

CSV_COLUMNS = (
    "schema_version", "sample_id", "config_id", "dataset_digest", "model", "mode", "outcome", "outcome_reason",
    "answer", "graded", "correct", "verdict", "grade_error", "searches_used", "tokens_in", "tokens_out", "early_stop", "cost",
    "retries", "rerank_fallbacks", "saturated", "n_turns", "started_at", "finished_at", "calls",
)
_INT_COLS = {"schema_version", "searches_used", "tokens_in", "tokens_out", "retries", "rerank_fallbacks", "n_turns"}
_BOOL_COLS = {"early_stop", "saturated"}


def export_records(records: Iterable[QuestionRecord], path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
    elif fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in records:
                d = r.to_dict()
                row = {c: d.get(c) for c in CSV_COLUMNS}
                row["graded"] = str(r.graded).lower()
                row["correct"] = "" if r.verdict is None else str(r.correct).lower()
                row["verdict"] = json.dumps(d["verdict"], ensure_ascii=False, sort_keys=True)
                row["calls"] = json.dumps(d["calls"], sort_keys=True)
                row["outcome_reason"] = json.dumps(r.outcome_reason)
                row["grade_error"] = json.dumps(r.grade_error)
                for c in _BOOL_COLS:
                    row[c] = str(d[c]).lower()
                writer.writerow(row)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def read_records(path: str | Path) -> list[QuestionRecord]:
    path = Path(path)
    if path.suffix == ".csv":
        out = []
        with path.open(encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                d: dict = {}
                for c in CSV_COLUMNS:
                    if c in ("graded", "correct"):
                        continue
                    v = row[c]
                    if c in _INT_COLS:
                        v = int(v)
                    elif c in _BOOL_COLS:
                        v = v == "true"
                    elif c in ("verdict", "calls", "outcome_reason", "grade_error"):
                        v = json.loads(v)
                    d[c] = v
                out.append(QuestionRecord.from_dict(d))
        return out
    return list(TelemetryLog(path).load().values())
