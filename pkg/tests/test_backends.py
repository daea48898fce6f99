import json

import pytest

from budgetsearch.backends import (
    BackendUnavailable,
    CallLog,
    CorruptLog,
    FinishReason,
    HttpBackend,
    ModelRequest,
    ModelResponse,
    PredicateMismatch,
    ScriptedBackend,
    ScriptedTrace,
    TraceExhausted,
    load_trace_file,
    record_replay,
)
from budgetsearch.budget import TokenUsage
from budgetsearch.engine import EngineConfig, run_trajectory
from helpers import StaticSearcher, answer_reply, search_reply, step
from stub_server import completion, serve


def test_scripted_replays_in_order_and_checks_expectations():
    backend = ScriptedBackend([step("one", expect="alpha"), step("two")])
    assert backend.complete(ModelRequest("xx alpha yy", 10)).text == "one"
    assert backend.complete(ModelRequest("anything", 10)).text == "two"
    with pytest.raises(TraceExhausted):
        backend.complete(ModelRequest("more", 10))
    with pytest.raises(PredicateMismatch):
        ScriptedBackend([step("x", expect="needle")]).complete(ModelRequest("haystack", 5))


def test_request_validation():
    with pytest.raises(ValueError):
        ModelRequest("p", 0)
    with pytest.raises(ValueError):
        ModelRequest("p", 5, temperature=-1)


def test_trace_file_forms(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps({
        "model": {"s1": [{"text": "hi", "completion_tokens": 3},
                         {"response": {"text": "yo", "usage": {"completion_tokens": 1}, "finish_reason": "length"}}]},
    }))
    traces = load_trace_file(path)
    assert traces["judge"] == {}
    steps = traces["model"]["s1"].steps
    assert steps[0].response.usage == TokenUsage(0, 3)
    assert steps[1].response.finish_reason is FinishReason.LENGTH


def test_http_retries_then_succeeds(tmp_path):
    def responder(payload, i):
        if i < 2:
            return 429, {"error": "slow down"}
        return 200, completion("hello", 12, 7)

    with serve(responder) as (url, seen):
        backend = HttpBackend(url, "m1", api_key="k", backoff_base=0.0, call_log=CallLog(tmp_path / "calls.jsonl"))
        resp = backend.complete(ModelRequest("prompt text", 64, seed=3, session="s"))
    assert resp.text == "hello"
    assert resp.usage == TokenUsage(12, 7)
    assert resp.retries == 2
    assert len(seen) == 3
    assert seen[0]["auth"] == "Bearer k"
    assert seen[0]["payload"]["max_tokens"] == 64 and seen[0]["payload"]["seed"] == 3
    assert len((tmp_path / "calls.jsonl").read_text().splitlines()) == 1


def test_http_gives_up_after_attempts():
    with serve(lambda p, i: (503, {})) as (url, seen):
        backend = HttpBackend(url, "m", api_key="k", max_attempts=3, backoff_base=0.0)
        with pytest.raises(BackendUnavailable):
            backend.complete(ModelRequest("p", 5))
    assert len(seen) == 3


def test_http_client_error_is_not_retried():
    with serve(lambda p, i: (400, {"error": "bad"})) as (url, seen):
        with pytest.raises(BackendUnavailable):
            HttpBackend(url, "m", api_key="k", backoff_base=0.0).complete(ModelRequest("p", 5))
    assert len(seen) == 1


def test_http_malformed_body():
    with serve(lambda p, i: (200, {"nope": 1})) as (url, _):
        with pytest.raises(BackendUnavailable):
            HttpBackend(url, "m", api_key="k").complete(ModelRequest("p", 5))


def test_record_replay_reproduces_trajectory(tmp_path):
    replies = [search_reply("first"), search_reply("second"), answer_reply("Done it")]

    def responder(payload, i):
        return 200, completion(replies[i], 50 + i, 20 + i)

    log_path = tmp_path / "calls.jsonl"
    with serve(responder) as (url, _):
        live = HttpBackend(url, "m", api_key="k", call_log=CallLog(log_path))
        first = run_trajectory("Q?", EngineConfig(), live, StaticSearcher(), session="sess-1")

    replay = ScriptedBackend(record_replay(log_path, "sess-1"))
    second = run_trajectory("Q?", EngineConfig(), replay, StaticSearcher(), session="sess-1")
    assert second.outcome == first.outcome
    assert [t.to_dict() for t in second.turns] == [t.to_dict() for t in first.turns]
    assert second.ledger.snapshot() == first.ledger.snapshot()
    assert record_replay(log_path, "other-session").steps == ()


def test_record_replay_missing_and_corrupt(tmp_path):
    assert record_replay(tmp_path / "none.jsonl", "s") == ScriptedTrace()
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"session": "s", "prompt": "p"}\n')
    with pytest.raises(CorruptLog):
        record_replay(bad, "s")


def test_response_dict_roundtrip():
    r = ModelResponse("t", TokenUsage(1, 2), FinishReason.LENGTH, retries=1)
    back = ModelResponse.from_dict(r.to_dict())
    assert (back.text, back.usage, back.finish_reason) == ("t", TokenUsage(1, 2), FinishReason.LENGTH)
