"""Binary answer grading: an LLM judge for reported numbers, exact match for offline CI."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

from .backends import ModelBackend, ModelRequest
from .prompts import fill, load_template

JUDGE_TEMPLATE = "judge-v1"
_LABEL = re.compile(r"^[\s\"'`*.]*(CORRECT|INCORRECT)[\s\"'`*.!]*$", re.IGNORECASE)


class UnparseableVerdict(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    correct: bool
    judge_id: str
    rationale: str | None = None

    def to_dict(self) -> dict:
        return {"correct": self.correct, "judge_id": self.judge_id, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: dict | None) -> Verdict | None:
        if d is None:
            return None
        return cls(bool(d["correct"]), d["judge_id"], d.get("rationale"))


def parse_label(text: str) -> bool:
    m = _LABEL.match(text)
    if not m:
        raise UnparseableVerdict(f"judge reply is not a bare label: {text[:80]!r}")
    return m.group(1).upper() == "CORRECT"


def judge_prompt(question: str, reference_answer: str, model_answer: str) -> str:
    return fill(load_template(JUDGE_TEMPLATE), question=question, reference=reference_answer, answer=model_answer)


def judge(question: str, reference_answer: str, model_answer: str, backend: ModelBackend,
          session: str | None = None) -> Verdict:
    """Ask the judge for CORRECT/INCORRECT, re-prompting once on an unusable reply.

    Raises UnparseableVerdict if the second reply is unusable too; callers mark
    the sample ungraded.
    """
    if not (question.strip() and reference_answer.strip()):
        raise ValueError("question and reference answer must be non-empty")
    if not model_answer.strip():
        # an empty answer cannot match a non-empty reference
        return Verdict(False, backend.backend_id, "empty answer")
    prompt = judge_prompt(question, reference_answer, model_answer)
    reply = backend.complete(ModelRequest(prompt, max_completion_tokens=8, temperature=0.0, session=session)).text
    try:
        return Verdict(parse_label(reply), backend.backend_id)
    except UnparseableVerdict:
        retry = prompt + load_template("judge-reminder-v1")
        reply = backend.complete(ModelRequest(retry, max_completion_tokens=8, temperature=0.0, session=session)).text
        return Verdict(parse_label(reply), backend.backend_id, "label after re-prompt")


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(reference: str, answer: str) -> Verdict:
    """Normalized equality, or the reference appearing as a whole-token span of the answer."""
    ref, ans = normalize_answer(reference), normalize_answer(answer)
    if not ref:
        return Verdict(False, "exact_match")
    ok = ref == ans or f" {ref} " in f" {ans} "
    return Verdict(ok, "exact_match")


class ExactMatchJudge:
    """Adapter so the runner can treat exact match like any other judge."""

    judge_id = "exact_match"

    def grade(self, question: str, reference_answer: str, model_answer: str, session: str | None = None) -> Verdict:
        return exact_match(reference_answer, model_answer)


class LLMJudge:
    def __init__(self, backend_factory):
        # factory(sample_id) -> ModelBackend, so scripted judges get one trace per sample
        self.backend_factory = backend_factory

    def grade(self, question: str, reference_answer: str, model_answer: str, session: str | None = None) -> Verdict:
        backend = self.backend_factory(session)
        return judge(question, reference_answer, model_answer, backend, session=session)
