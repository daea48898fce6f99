from __future__ import annotations

from pathlib import Path

from budgetsearch.backends import ModelResponse, ScriptedBackend, ScriptedStep
from budgetsearch.budget import TokenUsage

FIXTURES = Path(__file__).parent / "fixtures"
TOY_DATASET = FIXTURES / "toy.jsonl"
TOY_SCRIPTS = FIXTURES / "toy_scripts.json"


def step(text: str, completion: int = 20, prompt: int = 100, expect: str = "") -> ScriptedStep:
    return ScriptedStep(expect, ModelResponse(text, TokenUsage(prompt, completion)))


def search_reply(query: str = "something", thought: str = "Need more evidence.") -> str:
    return f"{thought}\n<<ACTION>>\ntool: search_database\narg.query: {query}\n<<END>>"


def answer_reply(answer: str, thought: str = "Done.") -> str:
    return f"{thought}\n<<ACTION>>\ntool: ready_to_answer\narg.answer: {answer}\n<<END>>"


def scripted(*steps: ScriptedStep) -> ScriptedBackend:
    return ScriptedBackend(list(steps))


class StaticSearcher:
    """Returns a fixed observation and counts calls."""

    def __init__(self, observation: str = "[1] doc: d1\nsome text"):
        self.observation = observation
        self.queries: list[str] = []

    def retrieve(self, query: str) -> str:
        self.queries.append(query)
        return self.observation
