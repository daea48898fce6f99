import json
import threading
import time
from dataclasses import replace
from pathlib import Path

import pytest

from budgetsearch.backends import BackendError, ScriptedBackend, load_trace_file
from budgetsearch.cli import main
from budgetsearch.runner import ConfigError, ExperimentConfig, expand_grid, run_experiment
from budgetsearch.tables import load_run
from budgetsearch.telemetry import TelemetryLog
from helpers import TOY_DATASET, TOY_SCRIPTS
from stub_server import completion, serve

SCRIPTED = f"scripted:{TOY_SCRIPTS}"


def toy_args(tmp_path: Path, *extra: str) -> list[str]:
    return ["run", "--dataset", str(TOY_DATASET), "--backend", SCRIPTED, "--judge", SCRIPTED,
            "--index-dir", str(tmp_path / "index"), "--output-dir", str(tmp_path / "runs"), *extra]


def toy_config(tmp_path: Path, **kw) -> ExperimentConfig:
    base = dict(dataset=str(TOY_DATASET), backend=SCRIPTED, judge=SCRIPTED, index_dir=str(tmp_path / "index"),
                output_dir=str(tmp_path / "runs"))
    return ExperimentConfig(**{**base, **kw}).validate()


def run_dirs(tmp_path: Path) -> list[Path]:
    return sorted(p for p in (tmp_path / "runs").iterdir() if p.is_dir())


def test_grid_over_search_budgets(tmp_path):
    assert main(toy_args(tmp_path, "--max-searches", "1", "2", "3", "unlimited")) == 0
    dirs = run_dirs(tmp_path)
    assert len(dirs) == 4
    caps = sorted(str(json.loads((d / "config.json").read_text())["config"]["max_searches"]) for d in dirs)
    assert caps == ["1", "2", "3", "unlimited"]
    for d in dirs:
        assert {"config.json", "telemetry.jsonl", "summary.json", "transcripts.jsonl"} <= {p.name for p in d.iterdir()}


def test_config_file_and_flag_override(tmp_path):
    cfg_file = tmp_path / "exp.toml"
    cfg_file.write_text(f'dataset = "{TOY_DATASET}"\nbackend = "{SCRIPTED}"\njudge = "{SCRIPTED}"\n'
                        f'max_searches = [1, 2]\noutput_dir = "runs"\nindex_dir = "index"\n')
    assert main(["run", "--config", str(cfg_file), "--max-searches", "3"]) == 0
    dirs = run_dirs(tmp_path)
    assert len(dirs) == 1 and "_s3_" in dirs[0].name


def test_config_digest():
    a = ExperimentConfig(dataset="d", backend="scripted:x").validate()
    b = ExperimentConfig(dataset="d", backend="scripted:x").validate()
    assert a.config_id == b.config_id and len(a.config_id) == 16
    changes = dict(dataset="e", max_searches=2, max_total_tokens=4000, preplan=True, reflection=True, seed=1,
                   model="other", judge="scripted:y", n_samples=3, concurrency=2, temperature=0.5, max_turns=9)
    ids = {replace(a, **{k: v}).validate().config_id for k, v in changes.items()}
    assert a.config_id not in ids and len(ids) == len(changes)


@pytest.mark.parametrize("raw", [
    {"dataset": "d", "backend": "scripted:x", "bogus": 1},
    {"dataset": "d", "backend": "ftp://x"},
    {"dataset": "d", "backend": "scripted:x", "mode": "HS_RR"},
    {"dataset": "d", "backend": "scripted:x", "max_searches": 0},
    {"dataset": "d", "backend": "scripted:x", "max_searches": [1, 1]},
    {"dataset": "d", "backend": "scripted:x", "grid": "nope"},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        expand_grid(raw)


def test_presets_expand():
    base = {"dataset": "d", "backend": "scripted:x", "reranker": "substring"}
    assert len(expand_grid({**base, "grid": "ablation"})) == 6
    assert len(expand_grid({**base, "grid": "search-scaling"})) == 6
    assert len(expand_grid({**base, "grid": "context-scaling"})) == 5


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--backend", SCRIPTED]) == 2
    assert main(toy_args(tmp_path, "--mode", "HS_RR")) == 2
    assert main(["stats", str(tmp_path / "missing")]) == 4
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "config.json").write_text(json.dumps({"config_id": "x", "dataset_digest": "d", "config": {}}))
    (empty / "telemetry.jsonl").write_text("")
    assert main(["stats", str(empty)]) == 2
    live = toy_args(tmp_path, "--backend", "http://127.0.0.1:9/v1")
    assert main(live) in (3, 4)
    capsys.readouterr()


def test_missing_api_key_is_environment_error(tmp_path, monkeypatch):
    monkeypatch.delenv("BCAS_API_KEY", raising=False)
    assert main(toy_args(tmp_path, "--backend", "http://127.0.0.1:9/v1")) == 4


def test_resume_is_idempotent(tmp_path):
    cfg = toy_config(tmp_path, concurrency=1)
    full = run_experiment(cfg)
    reference = (full.run_dir / "telemetry.jsonl").read_bytes()
    lines = reference.decode().splitlines(keepends=True)
    # simulate a kill after 7 records, mid-write of the eighth
    (full.run_dir / "telemetry.jsonl").write_text("".join(lines[:7]) + lines[7][:25])
    again = run_experiment(cfg)
    assert again.skipped == 7
    assert (again.run_dir / "telemetry.jsonl").read_bytes() == reference
    third = run_experiment(cfg)
    assert third.skipped == 20 and (third.run_dir / "telemetry.jsonl").read_bytes() == reference


def test_rerun_is_byte_identical(tmp_path):
    cfg = toy_config(tmp_path, concurrency=4)
    first = (run_experiment(cfg).run_dir / "telemetry.jsonl").read_bytes()
    (cfg.run_dir / "telemetry.jsonl").unlink()
    (cfg.run_dir / "transcripts.jsonl").unlink()
    assert (run_experiment(cfg).run_dir / "telemetry.jsonl").read_bytes() == first


def test_concurrency_cap(tmp_path):
    traces = load_trace_file(TOY_SCRIPTS)["model"]
    lock = threading.Lock()
    live, peak = [0], [0]

    class Slow(ScriptedBackend):
        def complete(self, request):
            with lock:
                live[0] += 1
                peak[0] = max(peak[0], live[0])
            time.sleep(0.01)
            try:
                return super().complete(request)
            finally:
                with lock:
                    live[0] -= 1

    cfg = toy_config(tmp_path, concurrency=3)
    result = run_experiment(cfg, backend_factory=lambda s: Slow(traces[s.sample_id]))
    assert result.exit_code == 0
    assert 1 < peak[0] <= 3


def test_partial_failure_exit_code(tmp_path):
    class Down(ScriptedBackend):
        def complete(self, request):
            raise BackendError("provider unavailable")

    def factory(sample):
        if sample.sample_id == "q05":
            return Down([])
        return ScriptedBackend(load_trace_file(TOY_SCRIPTS)["model"][sample.sample_id])

    result = run_experiment(toy_config(tmp_path), backend_factory=factory)
    assert result.exit_code == 3
    rec = next(r for r in result.records if r.sample_id == "q05")
    assert rec.outcome == "failed" and rec.verdict is None


def test_index_rebuild_and_digest(tmp_path, capsys):
    args = ["index", "--dataset", str(TOY_DATASET), "--index-dir", str(tmp_path / "ix")]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["chunks"] == 60 and first["documents"] == 60
    for p in (tmp_path / "ix" / "toy").iterdir():
        if p.is_file():
            p.write_bytes(p.read_bytes()[:10])
    assert main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert main([*args, "--rebuild"]) == 0
    third = json.loads(capsys.readouterr().out)
    assert first["index_digest"] == second["index_digest"] == third["index_digest"]


def test_stats_and_export(tmp_path, capsys):
    assert main(toy_args(tmp_path, "--mode", "BM25", "HS", "HS_RR", "--max-searches", "3", "unlimited",
                         "--reranker", "substring")) == 0
    dirs = [str(d) for d in run_dirs(tmp_path)]
    assert len(dirs) == 6
    capsys.readouterr()
    out = tmp_path / "tables"
    assert main(["stats", *dirs, "--out", str(out), "--mode", "HS"]) == 0
    text = capsys.readouterr().out
    assert "Average" in text and "HS+RR" in text
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 7
    assert {"summary.txt", "grid.csv", "ablation.csv", "ablation.txt"} <= {p.name for p in out.iterdir()}

    price = tmp_path / "p.json"
    price.write_text(json.dumps({"input_per_million": 1, "output_per_million": 4, "per_search": 0.001}))
    assert main(["export", dirs[0], "--out", str(tmp_path / "r.csv"), "--price-sheet", str(price)]) == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 21
    assert main(["export", dirs[0], "--out", str(tmp_path / "r.jsonl")]) == 0
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 20


def test_grid_cell_collision_needs_mode_filter(tmp_path, capsys):
    assert main(toy_args(tmp_path, "--mode", "BM25", "HS", "--max-searches", "1")) == 0
    dirs = [str(d) for d in run_dirs(tmp_path)]
    capsys.readouterr()
    assert main(["stats", *dirs]) == 2
    assert main(["stats", *dirs, "--mode", "HS"]) == 0


def test_live_run_and_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("BCAS_API_KEY", "test-key")

    def responder(payload, index):
        text = json.dumps(payload["messages"])
        if "Observation" in text or "[1]" in text:
            return 200, completion("Done.\n<<ACTION>>\ntool: ready_to_answer\narg.answer: Avalon\n<<END>>", 50, 6)
        return 200, completion("Look.\n<<ACTION>>\ntool: search_database\narg.query: capital\n<<END>>", 40, 9)

    with serve(responder) as (url, seen):
        args = toy_args(tmp_path, "--backend", url, "--judge", "exact", "--n-samples", "4", "--concurrency", "2")
        assert main(args) == 0
    assert all(s["auth"] == "Bearer test-key" for s in seen)
    src = run_dirs(tmp_path)[0]
    assert (src / "calls.jsonl").exists()
    monkeypatch.delenv("BCAS_API_KEY")
    out = tmp_path / "replayed"
    assert main(["replay", str(src), "--output-dir", str(out)]) == 0
    replayed = load_run(next(p for p in out.iterdir() if p.is_dir()))
    original = load_run(src)
    key = lambda r: (r.sample_id, r.answer, r.tokens_in, r.tokens_out, r.searches_used)  # noqa: E731
    assert sorted(map(key, replayed.records)) == sorted(map(key, original.records))


def test_telemetry_keys_unique_after_resume(tmp_path):
    cfg = toy_config(tmp_path)
    run_experiment(cfg)
    run_experiment(cfg)
    lines = (cfg.run_dir / "telemetry.jsonl").read_text().splitlines()
    assert len(lines) == 20 == len(TelemetryLog(cfg.run_dir / "telemetry.jsonl").load())
