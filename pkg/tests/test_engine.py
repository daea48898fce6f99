import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetsearch.backends import BackendUnavailable, ScriptedBackend
from budgetsearch.budget import UNLIMITED, BudgetConfig, BudgetLedger
from budgetsearch.engine import (
    ANSWER,
    FORMAT_REMINDER,
    SEARCH,
    Answered,
    BudgetExhausted,
    EngineConfig,
    Failed,
    FinalAnswer,
    MalformedAction,
    ToolCall,
    TrajectoryState,
    available_tools,
    parse_action,
    render_prompt,
    run_trajectory,
)
from helpers import StaticSearcher, answer_reply, scripted, search_reply, step

Q = "Who wrote the novel?"


def cfg(searches=UNLIMITED, tokens=16000, **kw) -> EngineConfig:
    return EngineConfig(budget=BudgetConfig(searches, tokens), **kw)


# --------------------------------------------------------------------------- parsing


def test_parse_first_wellformed_block():
    text = ("Thought: think\n<<ACTION>>\nnot a tool line\n<<END>>\n"
            "<<ACTION>>\ntool: search_database\narg.query: capital of France\n<<END>>\n"
            "<<ACTION>>\ntool: ready_to_answer\narg.answer: Paris\n<<END>>")
    thought, action = parse_action(text)
    assert action == ToolCall(SEARCH, {"query": "capital of France"})
    assert thought.startswith("think")


def test_parse_answer_multiline_value():
    _, action = parse_action("ok\n<<ACTION>>\ntool: ready_to_answer\narg.answer: line one\nline two\n<<END>>")
    assert action == FinalAnswer("line one\nline two")


@pytest.mark.parametrize("text", [
    "",
    "just prose",
    "<<ACTION>>\ntool: ready_to_answer\n<<END>>",
    "<<ACTION>>\ntool: search_database\narg.query: x",
    "<<ACTION>>\n\n<<END>>",
])
def test_parse_malformed(text):
    with pytest.raises(MalformedAction):
        parse_action(text)


def test_registry_requires_answer_tool():
    from budgetsearch.engine import SEARCH_TOOL

    with pytest.raises(ValueError):
        available_tools(BudgetLedger(BudgetConfig()), (SEARCH_TOOL,))


def test_prompt_shows_budget_and_tools():
    state = TrajectoryState(Q, BudgetLedger(BudgetConfig(2, 900)))
    prompt = render_prompt(state, available_tools(state.ledger))
    assert "remaining searches: 2; remaining completion tokens: 900" in prompt
    assert f"- {SEARCH}(query)" in prompt and f"- {ANSWER}(answer)" in prompt
    assert "(none yet)" in prompt


# --------------------------------------------------------------------------- loop


def test_answer_immediately_is_early_stop():
    state = run_trajectory(Q, cfg(3), scripted(step(answer_reply("Austen"))), StaticSearcher())
    assert state.outcome == Answered("Austen")
    assert state.early_stop
    assert state.ledger.searches_used == 0


def test_search_budget_removes_tool_and_forces_answer():
    backend = scripted(step(search_reply("a")), step(search_reply("b")), step(answer_reply("forced")))
    searcher = StaticSearcher()
    state = run_trajectory(Q, cfg(1), backend, searcher)
    assert searcher.queries == ["a"]
    assert f"- {SEARCH}(" not in backend.prompts[1]
    assert isinstance(state.outcome, BudgetExhausted) and state.outcome.reason == "searches"
    assert state.outcome.answer == "forced"
    assert not state.early_stop
    assert [c.kind for c in state.calls] == ["act", "act", "forced"]
    assert backend.requests[-1].max_completion_tokens == 512


def test_answer_after_budget_spent_is_not_early_stop():
    backend = scripted(step(search_reply()), step(answer_reply("x")))
    state = run_trajectory(Q, cfg(1), backend, StaticSearcher())
    assert state.outcome == Answered("x") and not state.early_stop


def test_token_budget_forces_answer_after_overshoot():
    backend = scripted(step(search_reply(), 300), step(search_reply(), 300), step("final: 42", 100))
    state = run_trajectory(Q, cfg(tokens=500), backend, StaticSearcher())
    assert isinstance(state.outcome, BudgetExhausted) and state.outcome.reason == "tokens"
    assert state.outcome.answer == "final: 42"
    assert state.ledger.completion_tokens_used == 700


def test_malformed_once_then_reminded():
    backend = scripted(step("no block here"), step(answer_reply("ok")))
    state = run_trajectory(Q, cfg(), backend, StaticSearcher())
    assert state.outcome == Answered("ok")
    assert FORMAT_REMINDER in backend.prompts[1]
    assert len(state.turns) == 2


def test_two_malformed_fail():
    backend = scripted(step("no"), step("still no"))
    state = run_trajectory(Q, cfg(), backend, StaticSearcher())
    assert state.outcome.kind == "failed" and state.outcome.reason == "unparseable"


def test_malformed_streak_resets():
    backend = scripted(step("no"), step(search_reply()), step("no"), step(answer_reply("y")))
    state = run_trajectory(Q, cfg(), backend, StaticSearcher())
    assert state.outcome == Answered("y")


def test_preplan_is_rendered_and_counted():
    backend = scripted(step("1. search author", 50), step(answer_reply("A"), expect="1. search author"))
    state = run_trajectory(Q, cfg(preplan_enabled=True), backend, StaticSearcher())
    assert state.plan == "1. search author"
    assert state.calls[0].kind == "plan"
    assert state.ledger.completion_tokens_used == 70


def test_reflection_every_interval():
    replies = [step(search_reply()) for _ in range(4)]
    backend = ScriptedBackend([replies[0], replies[1], step("note one", 10), replies[2], replies[3],
                               step("note two", 10), step(answer_reply("z"), expect="Reflection: note two")])
    state = run_trajectory(Q, cfg(reflection_enabled=True), backend, StaticSearcher())
    assert state.reflections == [(2, "note one"), (4, "note two")]
    assert [c.kind for c in state.calls].count("reflect") == 2


def test_max_turns_forces_answer():
    backend = ScriptedBackend([step(search_reply()) for _ in range(3)] + [step("guess")])
    state = run_trajectory(Q, cfg(max_turns=3), backend, StaticSearcher())
    assert state.outcome == BudgetExhausted("guess", "max_turns")


def test_backend_failure_is_recorded():
    class Broken:
        backend_id = "broken"

        def complete(self, request):
            raise BackendUnavailable("down")

    state = run_trajectory(Q, cfg(), Broken(), StaticSearcher())
    assert state.outcome == Failed("backend", "down")


def test_searcher_error_becomes_observation():
    class Exploding:
        def retrieve(self, query):
            raise RuntimeError("index offline")

    backend = scripted(step(search_reply()), step(answer_reply("n/a")))
    state = run_trajectory(Q, cfg(), backend, Exploding())
    assert "search failed" in state.turns[0].observation
    assert state.ledger.searches_used == 1


def test_empty_query_does_not_consume_search():
    backend = scripted(step("t\n<<ACTION>>\ntool: search_database\narg.query:\n<<END>>"), step(answer_reply("a")))
    state = run_trajectory(Q, cfg(1), backend, StaticSearcher())
    assert state.ledger.searches_used == 0


def test_finish_only_once():
    state = TrajectoryState(Q, BudgetLedger(BudgetConfig()))
    state.finish(Answered("a"))
    with pytest.raises(RuntimeError):
        state.finish(Answered("b"))


# --------------------------------------------------------------------------- properties

_KINDS = st.sampled_from(["search", "answer", "malformed"])


@settings(max_examples=200, deadline=None)
@given(
    kinds=st.lists(_KINDS, min_size=1, max_size=30),
    usages=st.lists(st.integers(0, 900), min_size=40, max_size=40),
    cap=st.one_of(st.just(UNLIMITED), st.integers(1, 5)),
    limit=st.integers(1, 8000),
    plan=st.booleans(),
    reflect=st.booleans(),
)
def test_loop_invariants(kinds, usages, cap, limit, plan, reflect):
    texts = {"search": search_reply(), "answer": answer_reply("x"), "malformed": "nothing"}
    steps = [step(texts[k], usages[i]) for i, k in enumerate(kinds)]
    steps += [step(answer_reply("pad"), usages[len(kinds) + i]) for i in range(40 - len(kinds))]
    steps = steps * 3
    backend = ScriptedBackend(steps)
    searcher = StaticSearcher()
    config = EngineConfig(budget=BudgetConfig(cap, limit), preplan_enabled=plan, reflection_enabled=reflect,
                          max_turns=25)
    state = run_trajectory(Q, config, backend, searcher)
    ledger = state.ledger

    assert state.terminal
    # search gate
    assert len(searcher.queries) == ledger.searches_used
    if cap is not UNLIMITED:
        assert ledger.searches_used <= cap
    for prompt, req in zip(backend.prompts, backend.requests):
        if f"- {SEARCH}(" in prompt:
            assert "remaining searches: 0;" not in prompt
    # no token leaks
    assert ledger.completion_tokens_used == sum(c.usage.completion_tokens for c in state.calls)
    assert ledger.completion_tokens_used == sum(r.response.usage.completion_tokens
                                                for r in backend.trace.steps[: len(backend.prompts)])
    # the threshold is checked after every call, so everything before the last
    # loop call and any forced answer stayed under the limit
    non_forced = [c for c in state.calls if c.kind != "forced"]
    assert sum(c.usage.completion_tokens for c in non_forced[:-1]) < limit
    forced = [c for c in state.calls if c.kind == "forced"]
    assert len(forced) <= 1
    assert (len(forced) == 1) == isinstance(state.outcome, BudgetExhausted)
    assert not state.early_stop or isinstance(state.outcome, Answered)
    if state.early_stop:
        assert cap is UNLIMITED or ledger.searches_used < cap
        # the answering call may cross the threshold; nothing before it did
        assert ledger.completion_tokens_used - state.calls[-1].usage.completion_tokens < limit
