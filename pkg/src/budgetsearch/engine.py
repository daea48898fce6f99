"""The budget-gated reason / act / observe loop."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

from .backends import BackendError, FinishReason, ModelBackend, ModelRequest, ModelResponse
from .budget import UNLIMITED, BudgetConfig, BudgetLedger, TokenUsage
from .prompts import fill, load_template

SEARCH = "search_database"
ANSWER = "ready_to_answer"

FORCED_ANSWER_CAP = 512
FORMAT_REMINDER = (
    "Your reply did not contain a valid action block. Reply with a thought and then exactly one block:\n"
    "<<ACTION>>\ntool: <tool name>\narg.<argument name>: <value>\n<<END>>"
)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    args: tuple[str, ...] = ()
    handler: Callable[[dict], str] | None = field(default=None, compare=False)

    def render(self) -> str:
        sig = ", ".join(self.args)
        return f"- {self.name}({sig}): {self.description}"


SEARCH_TOOL = ToolSpec(
    SEARCH,
    "Search the document collection. Returns the five most relevant passages for the query. "
    "Each call uses one of your remaining searches.",
    ("query",),
)
ANSWER_TOOL = ToolSpec(
    ANSWER,
    "Give your final answer to the question. Use it as soon as you are confident; this ends the task.",
    ("answer",),
)
DEFAULT_TOOLS: tuple[ToolSpec, ...] = (SEARCH_TOOL, ANSWER_TOOL)


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: dict = field(default_factory=dict)

    def render(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self.args.items())
        return f"{self.tool}({inner})"


@dataclass(frozen=True)
class FinalAnswer:
    text: str

    def render(self) -> str:
        return f"{ANSWER}(answer={self.text!r})"


@dataclass(frozen=True)
class Malformed:
    raw: str

    def render(self) -> str:
        return "(no valid action block)"


Action = Union[ToolCall, FinalAnswer, Malformed]


class MalformedAction(ValueError):
    pass


@dataclass
class Turn:
    thought: str
    action: Action
    observation: str
    usage: TokenUsage

    def to_dict(self) -> dict:
        d: dict = {"thought": self.thought, "observation": self.observation,
                   "prompt_tokens": self.usage.prompt_tokens, "completion_tokens": self.usage.completion_tokens}
        if isinstance(self.action, ToolCall):
            d["action"] = {"tool": self.action.tool, "args": dict(self.action.args)}
        elif isinstance(self.action, FinalAnswer):
            d["action"] = {"tool": ANSWER, "args": {"answer": self.action.text}}
        else:
            d["action"] = None
        return d


@dataclass(frozen=True)
class Answered:
    answer: str
    kind = "answered"


@dataclass(frozen=True)
class BudgetExhausted:
    answer: str
    reason: str  # "tokens" | "searches" | "max_turns"
    kind = "budget_exhausted"


@dataclass(frozen=True)
class Failed:
    reason: str  # "backend" | "unparseable"
    detail: str = ""
    kind = "failed"

    @property
    def answer(self) -> str:
        return ""


Outcome = Union[Answered, BudgetExhausted, Failed]


@dataclass(frozen=True)
class CallRecord:
    """One backend call. ``kind`` is one of plan, act, reflect, forced."""

    kind: str
    usage: TokenUsage
    finish_reason: FinishReason = FinishReason.STOP

    def to_dict(self) -> dict:
        return {"kind": self.kind, "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens, "finish_reason": self.finish_reason.value}


@dataclass
class TrajectoryState:
    question: str
    ledger: BudgetLedger
    plan: str | None = None
    turns: list[Turn] = field(default_factory=list)
    reflections: list[tuple[int, str]] = field(default_factory=list)
    calls: list[CallRecord] = field(default_factory=list)
    outcome: Outcome | None = None
    early_stop: bool = False
    retries: int = 0
    rerank_fallbacks: int = 0

    @property
    def terminal(self) -> bool:
        return self.outcome is not None

    def append_turn(self, turn: Turn) -> None:
        if self.terminal:
            raise RuntimeError("cannot append turns to a finished trajectory")
        self.turns.append(turn)

    def finish(self, outcome: Outcome, early_stop: bool = False) -> TrajectoryState:
        if self.terminal:
            raise RuntimeError(f"outcome already set to {self.outcome!r}")
        self.outcome = outcome
        self.early_stop = early_stop and isinstance(outcome, Answered)
        return self

    @property
    def tool_turns(self) -> int:
        return sum(isinstance(t.action, ToolCall) for t in self.turns)


@dataclass(frozen=True)
class EngineConfig:
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    preplan_enabled: bool = False
    reflection_enabled: bool = False
    reflection_interval: int = 2
    max_turns: int = 25
    prompt_template_id: str = "agent-v1"
    temperature: float = 0.0
    seed: int | None = None
    forced_answer_cap: int = FORCED_ANSWER_CAP

    def __post_init__(self) -> None:
        if self.reflection_interval < 1:
            raise ValueError("reflection_interval must be >= 1")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


class Searcher(Protocol):
    def retrieve(self, query: str): ...


# --------------------------------------------------------------------------- prompt side


def available_tools(ledger: BudgetLedger, registry: tuple[ToolSpec, ...] | list[ToolSpec] = DEFAULT_TOOLS) -> list[ToolSpec]:
    if not any(t.name == ANSWER for t in registry):
        raise ValueError(f"tool registry must contain {ANSWER}")
    return [t for t in registry if t.name != SEARCH or ledger.can_search]


def _render_history(state: TrajectoryState) -> str:
    if not state.turns and not state.reflections:
        return "(none yet)"
    notes: dict[int, list[str]] = {}
    for after, text in state.reflections:
        notes.setdefault(after, []).append(text)
    parts = []
    for i, turn in enumerate(state.turns, 1):
        block = [f"Step {i}", f"Thought: {turn.thought}", f"Action: {turn.action.render()}"]
        if turn.observation:
            block.append(f"Observation: {turn.observation}")
        parts.append("\n".join(block))
        for note in notes.get(i, ()):
            parts.append(f"Reflection: {note}")
    return "\n\n".join(parts)


def _budget_fields(ledger: BudgetLedger) -> dict:
    remaining = ledger.searches_remaining
    return {
        "searches_remaining": "unlimited" if remaining is UNLIMITED else remaining,
        "tokens_remaining": ledger.tokens_remaining,
    }


def _plan_block(state: TrajectoryState) -> str:
    return f"\nResearch plan:\n{state.plan}\n" if state.plan else ""


def render_prompt(state: TrajectoryState, tools: list[ToolSpec], template_id: str = "agent-v1") -> str:
    if state.terminal:
        raise RuntimeError("cannot prompt a finished trajectory")
    return fill(
        load_template(template_id),
        question=state.question,
        plan=_plan_block(state),
        tools="\n".join(t.render() for t in tools),
        history=_render_history(state),
        **_budget_fields(state.ledger),
    )


_BLOCK = re.compile(r"<<ACTION>>[ \t]*\r?\n(.*?)<<END>>", re.DOTALL)
_TOOL_LINE = re.compile(r"^\s*tool:\s*([A-Za-z_][A-Za-z0-9_]*)\s*$")
_ARG_LINE = re.compile(r"^\s*arg\.([A-Za-z_][A-Za-z0-9_]*):[ \t]?(.*)$")


def _parse_block(body: str) -> ToolCall | FinalAnswer | None:
    lines = [ln for ln in body.splitlines()]
    while lines and not lines[0].strip():
        lines.pop(0)
    if not lines:
        return None
    m = _TOOL_LINE.match(lines[0])
    if not m:
        return None
    tool = m.group(1)
    args: dict[str, str] = {}
    key = None
    for ln in lines[1:]:
        am = _ARG_LINE.match(ln)
        if am:
            key = am.group(1)
            args[key] = am.group(2)
        elif key is not None:
            # continuation line of a multi-line value
            args[key] += "\n" + ln
        elif ln.strip():
            return None
    args = {k: v.strip() for k, v in args.items()}
    if tool == ANSWER:
        if not args.get("answer"):
            return None
        return FinalAnswer(args["answer"])
    return ToolCall(tool, args)


def parse_action(model_output: str) -> tuple[str, ToolCall | FinalAnswer]:
    for m in _BLOCK.finditer(model_output):
        action = _parse_block(m.group(1))
        if action is None:
            continue
        thought = model_output[: m.start()].strip()
        thought = re.sub(r"^(thought)\s*:\s*", "", thought, flags=re.IGNORECASE)
        return thought, action
    raise MalformedAction("no valid <<ACTION>> ... <<END>> block in model output")


# --------------------------------------------------------------------------- calls


def _call(state: TrajectoryState, backend: ModelBackend, config: EngineConfig, prompt: str,
          kind: str, max_tokens: int | None = None, session: str | None = None) -> ModelResponse:
    if max_tokens is None:
        max_tokens = max(1, state.ledger.tokens_remaining)
    request = ModelRequest(prompt=prompt, max_completion_tokens=max_tokens,
                           temperature=config.temperature, seed=config.seed, session=session)
    response = backend.complete(request)
    state.ledger.charge_turn(response.usage)
    state.calls.append(CallRecord(kind, response.usage, response.finish_reason))
    state.retries += response.retries
    return response


def preplan(state: TrajectoryState, config: EngineConfig, backend: ModelBackend, session: str | None = None) -> str:
    prompt = fill(load_template("plan-v1"), question=state.question, **_budget_fields(state.ledger))
    response = _call(state, backend, config, prompt, "plan", session=session)
    state.plan = response.text.strip()
    return state.plan


def reflect(state: TrajectoryState, config: EngineConfig, backend: ModelBackend, session: str | None = None) -> str:
    if state.terminal:
        raise RuntimeError("cannot reflect on a finished trajectory")
    prompt = fill(load_template("reflect-v1"), question=state.question, plan=_plan_block(state),
                  history=_render_history(state), **_budget_fields(state.ledger))
    response = _call(state, backend, config, prompt, "reflect", session=session)
    note = response.text.strip()
    state.reflections.append((len(state.turns), note))
    return note


def reflection_due(state: TrajectoryState, config: EngineConfig) -> bool:
    n = state.tool_turns
    return config.reflection_enabled and n > 0 and n % config.reflection_interval == 0 and not state.terminal


_FORCED_REASONS = {
    "tokens": "You have used up your completion-token budget.",
    "searches": "You have used all of your searches.",
    "max_turns": "You have reached the maximum number of steps.",
}


def _force_answer(state: TrajectoryState, config: EngineConfig, backend: ModelBackend, reason: str,
                  session: str | None) -> TrajectoryState:
    prompt = fill(load_template("forced-answer-v1"), reason=_FORCED_REASONS[reason], question=state.question,
                  plan=_plan_block(state), history=_render_history(state))
    response = _call(state, backend, config, prompt, "forced", max_tokens=config.forced_answer_cap, session=session)
    try:
        _, action = parse_action(response.text)
        answer = action.text if isinstance(action, FinalAnswer) else ""
    except MalformedAction:
        answer = _BLOCK.sub("", response.text).strip()
    return state.finish(BudgetExhausted(answer, reason))


def _run_tool(state: TrajectoryState, call: ToolCall, tools: list[ToolSpec], searcher: Searcher) -> str:
    if call.tool == SEARCH:
        query = call.args.get("query", "").strip()
        if not query:
            return "Error: search_database needs a non-empty query argument."
        state.ledger.charge_search()
        try:
            result = searcher.retrieve(query)
        except (RuntimeError, KeyError, ValueError) as exc:
            return f"Error: search failed ({type(exc).__name__}: {exc})."
        if isinstance(result, str):
            return result
        if getattr(result, "fallback", False):
            state.rerank_fallbacks += 1
        return result.observation
    spec = next((t for t in tools if t.name == call.tool), None)
    if spec is None or spec.handler is None:
        return f"Error: unknown tool {call.tool!r}. Available tools: {', '.join(t.name for t in tools)}."
    return spec.handler(dict(call.args))


def run_trajectory(
    question: str,
    config: EngineConfig,
    backend: ModelBackend,
    searcher: Searcher,
    registry: tuple[ToolSpec, ...] = DEFAULT_TOOLS,
    session: str | None = None,
) -> TrajectoryState:
    """Run one question to a terminal state.

    Backend errors end the trajectory as ``Failed("backend")``; scripted-trace
    errors propagate since they mean the fixture is wrong.
    """
    state = TrajectoryState(question=question, ledger=BudgetLedger(config.budget))
    ledger = state.ledger
    try:
        if config.preplan_enabled:
            preplan(state, config, backend, session)
            if ledger.token_exhausted:
                return _force_answer(state, config, backend, "tokens", session)

        malformed_streak = 0
        while True:
            if len(state.turns) >= config.max_turns:
                return _force_answer(state, config, backend, "max_turns", session)
            tools = available_tools(ledger, registry)
            prompt = render_prompt(state, tools, config.prompt_template_id)
            response = _call(state, backend, config, prompt, "act", session=session)
            try:
                thought, action = parse_action(response.text)
            except MalformedAction:
                malformed_streak += 1
                state.append_turn(Turn(response.text.strip(), Malformed(response.text),
                                       FORMAT_REMINDER if malformed_streak == 1 else "", response.usage))
                if malformed_streak > 1:
                    return state.finish(Failed("unparseable", "two consecutive replies without an action block"))
                if ledger.token_exhausted:
                    return _force_answer(state, config, backend, "tokens", session)
                continue
            malformed_streak = 0

            if isinstance(action, FinalAnswer):
                # answering after the search allowance is spent is not an early stop
                early = ledger.can_search
                state.append_turn(Turn(thought, action, "", response.usage))
                return state.finish(Answered(action.text), early_stop=early)

            if action.tool == SEARCH and not ledger.can_search:
                state.append_turn(Turn(thought, action, "Error: search_database is not available; "
                                       "the search budget is spent.", response.usage))
                return _force_answer(state, config, backend, "searches", session)

            observation = _run_tool(state, action, tools, searcher)
            state.append_turn(Turn(thought, action, observation, response.usage))

            if ledger.token_exhausted:
                return _force_answer(state, config, backend, "tokens", session)
            if reflection_due(state, config) and isinstance(action, ToolCall):
                reflect(state, config, backend, session)
                if ledger.token_exhausted:
                    return _force_answer(state, config, backend, "tokens", session)
    except BackendError as exc:
        if not state.terminal:
            state.finish(Failed("backend", str(exc)))
        return state
