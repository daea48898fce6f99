"""Summary, budget-grid and ablation tables rendered as CSV and aligned text."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Iterable, Sequence

from .telemetry import (
    NoGradedSamples,
    QuestionRecord,
    RunSummary,
    TelemetryLog,
    ablation_delta,
    aggregate,
    signed,
)

TOKEN_COLUMNS = ((500, "500"), (1000, "1K"), (2000, "2K"), (4000, "4K"))
SEARCH_COLUMNS = ((1, "1"), (2, "2"), (3, "3"), ("unlimited", "Unlimited"))
GRID_TOKENS = 16000
GRID_HEADER = ["Model", *(c for _, c in TOKEN_COLUMNS), *(c for _, c in SEARCH_COLUMNS), "Plan", "Plan+RF"]

# column -> (mode, preplan, reflection) relative to the BM25 baseline
ABLATIONS = {
    "Plan": ("BM25", True, False),
    "RF": ("BM25", False, True),
    "Plan+RF": ("BM25", True, True),
    "HS": ("HS", False, False),
    "HS+RR": ("HS_RR", False, False),
}
MISSING = "-"


class AmbiguousCell(ValueError):
    pass


@dataclass
class RunView:
    """One run directory: its config, records and summary."""

    path: Path
    config: dict
    dataset: str
    records: list[QuestionRecord]
    summary: RunSummary

    @property
    def model(self) -> str:
        return self.config["model"]

    @property
    def mode(self) -> str:
        return self.config["mode"]


def load_run(path: str | Path) -> RunView:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text(encoding="utf-8"))
    log = TelemetryLog(path / "telemetry.jsonl")
    records = [r for r in log.load().values() if r.config_id == meta["config_id"]]
    records.sort(key=lambda r: r.sample_id)
    if not records:
        raise NoGradedSamples(f"{path}: no telemetry records")
    return RunView(path, meta["config"], meta.get("dataset_name", meta["config"]["dataset"]), records, aggregate(records))


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-align the first column, right-align the rest; one-cell rows become section banners."""
    full = [r for r in rows if len(r) > 1]
    widths = [max(len(str(r[i])) for r in [header, *full]) for i in range(len(header))]
    total = sum(widths) + 2 * (len(widths) - 1)

    def line(r: Sequence[str]) -> str:
        cells = [str(r[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(r[1:], widths[1:])]
        return "  ".join(cells).rstrip()

    out = [line(header), "-" * total]
    for r in rows:
        out.append(f"[{r[0]}]".center(total).rstrip() if len(r) == 1 else line(r))
    return "\n".join(out) + "\n"


def render_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- per-run summary

SUMMARY_HEADER = ["Run", "Dataset", "Model", "Mode", "Searches", "Tokens", "Plan", "RF", "n", "Accuracy",
                  "Wilson low", "Wilson high", "Mean searches", "Mean tokens out", "Cost"]


def summary_table(runs: Iterable[RunView]) -> tuple[list[str], list[list[str]]]:
    rows = []
    for run in runs:
        c, s = run.config, run.summary
        rows.append([run.path.name, run.dataset, run.model, run.mode, str(c["max_searches"]), str(c["max_total_tokens"]),
                     "y" if c["preplan"] else "n", "y" if c["reflection"] else "n", str(s.n_graded),
                     _fmt(s.accuracy), _fmt(s.wilson_low), _fmt(s.wilson_high), _fmt(s.mean_searches),
                     _fmt(s.mean_tokens_out), str(s.total_cost)])
    return SUMMARY_HEADER, rows


# --------------------------------------------------------------------------- budget grid


def grid_column(config: dict) -> str | None:
    """Which budget-grid column a run belongs to, if any."""
    searches, tokens = config["max_searches"], config["max_total_tokens"]
    plan, rf = config["preplan"], config["reflection"]
    if searches == "unlimited" and tokens == GRID_TOKENS:
        if plan and rf:
            return "Plan+RF"
        if plan and not rf:
            return "Plan"
    if plan or rf:
        return None
    if tokens == GRID_TOKENS:
        for value, label in SEARCH_COLUMNS:
            if searches == value:
                return label
    if searches == "unlimited":
        for value, label in TOKEN_COLUMNS:
            if tokens == value:
                return label
    return None


def _sections(runs: Iterable[RunView]) -> dict[str, dict[str, list[RunView]]]:
    out: dict[str, dict[str, list[RunView]]] = {}
    for run in runs:
        out.setdefault(run.dataset, {}).setdefault(run.model, []).append(run)
    return out


def grid_table(runs: Iterable[RunView]) -> tuple[list[str], list[list[str]]]:
    """Accuracy by budget: token limits, search caps at 16K, then planning variants; a section per dataset."""
    rows: list[list[str]] = []
    for dataset, by_model in _sections(runs).items():
        rows.append([dataset])
        for model, model_runs in by_model.items():
            cells: dict[str, RunView] = {}
            for run in model_runs:
                col = grid_column(run.config)
                if col is None:
                    continue
                if col in cells:
                    raise AmbiguousCell(f"{dataset}/{model}: runs {cells[col].path.name} and {run.path.name} "
                                        f"both fill column {col}; filter by mode")
                cells[col] = run
            rows.append([model, *(_fmt(cells[c].summary.accuracy) if c in cells else MISSING for c in GRID_HEADER[1:])])
    return GRID_HEADER, rows


# --------------------------------------------------------------------------- ablation deltas


def _ablation_key(config: dict) -> str | None:
    if config["max_searches"] != "unlimited" or config["max_total_tokens"] != GRID_TOKENS:
        return None
    sig = (config["mode"], config["preplan"], config["reflection"])
    if sig == ("BM25", False, False):
        return "baseline"
    for label, want in ABLATIONS.items():
        if sig == want:
            return label
    return None


def ablation_table(runs: Iterable[RunView]) -> tuple[list[str], list[list[str]], list[str], list[list[str]]]:
    """Signed deltas versus the BM25 baseline per model plus an Average row.

    Returns (text header, text rows, csv header, csv rows); the CSV also carries
    the paired interval bounds for every cell.
    """
    labels = list(ABLATIONS)
    header = ["Model", *labels]
    csv_header = ["Dataset", "Model", *labels, *(f"{c} {b}" for c in labels for b in ("low", "high"))]
    rows: list[list[str]] = []
    csv_rows: list[list[str]] = []
    for dataset, by_model in _sections(runs).items():
        rows.append([dataset])
        deltas: dict[str, list[float]] = {c: [] for c in labels}
        for model, model_runs in by_model.items():
            cells: dict[str, RunView] = {}
            for run in model_runs:
                key = _ablation_key(run.config)
                if key is None:
                    continue
                if key in cells:
                    raise AmbiguousCell(f"{dataset}/{model}: two runs for {key}")
                cells[key] = run
            if "baseline" not in cells:
                continue
            base = cells["baseline"]
            text, bounds = [model], {}
            for label in labels:
                if label not in cells:
                    text.append(MISSING)
                    bounds[label] = ("", "")
                    continue
                var = cells[label]
                rep = ablation_delta(base.summary, var.summary, base.records, var.records)
                deltas[label].append(rep.delta)
                text.append(rep.formatted())
                bounds[label] = (signed(rep.low), signed(rep.high))
            rows.append(text)
            csv_rows.append([dataset, *text, *(b for c in labels for b in bounds[c])])
        avg = ["Average", *(signed(fmean(deltas[c])) if deltas[c] else MISSING for c in labels)]
        rows.append(avg)
        csv_rows.append([dataset, *avg, *([""] * 2 * len(labels))])
    return header, rows, csv_header, csv_rows


def grid_csv_rows(rows: list[list[str]]) -> list[list[str]]:
    """Flatten banner rows into a leading dataset column for CSV."""
    out, dataset = [], ""
    for r in rows:
        if len(r) == 1:
            dataset = r[0]
        else:
            out.append([dataset, *r])
    return out


def write_tables(runs: Sequence[RunView], out_dir: str | Path,
                 grid_runs: Sequence[RunView] | None = None) -> dict[str, Path]:
    """Write summary, grid and ablation tables as .csv and .txt; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    def emit(name: str, header, rows, csv_header=None, csv_rows=None) -> None:
        (out_dir / f"{name}.txt").write_text(render_text(header, rows), encoding="utf-8")
        (out_dir / f"{name}.csv").write_text(render_csv(header if csv_header is None else csv_header,
                                                                  rows if csv_rows is None else csv_rows), encoding="utf-8")
        written[name] = out_dir / f"{name}.txt"

    emit("summary", *summary_table(runs))
    header, rows = grid_table(runs if grid_runs is None else grid_runs)
    emit("grid", header, rows, ["Dataset", *header], grid_csv_rows(rows))
    emit("ablation", *ablation_table(runs))
    return written
