"""QA benchmark loaders normalized to one sample schema, plus dataset fingerprinting.

Supported inputs:

* ``hotpotqa`` - the HotpotQA JSON array (``_id``, ``question``, ``answer``,
  ``level``, ``supporting_facts``, ``context``).
* ``2wiki`` - the 2WikiMultihopQA JSON array (same layout, no ``level``).
* ``triviaqa`` - the TriviaQA ``{"Data": [...]}`` file. Evidence text is read
  from ``evidence_dir/<Filename>`` when available, otherwise from an inline
  ``Content`` field.
* ``jsonl`` - the normalized interchange format: one object per line with
  ``sample_id``, ``question``, ``answer``, optional ``source_docs``,
  ``difficulty`` and ``documents`` (list of ``{doc_id, title, text}``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .retrieval.index import Document

log = logging.getLogger(__name__)

FORMATS = ("hotpotqa", "2wiki", "triviaqa", "jsonl")


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingField(SchemaError):
    def __init__(self, field_name: str, line: int | None = None):
        self.field = field_name
        super().__init__(f"missing field {field_name!r}", line)


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: str
    question: str
    reference_answer: str
    source_docs: tuple[str, ...] = ()
    difficulty: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError(f"sample {self.sample_id}: empty question")
        if not self.reference_answer.strip():
            raise ValueError(f"sample {self.sample_id}: empty reference answer")

    def canonical(self) -> list:
        # fixed field order; this is what gets hashed
        return [self.sample_id, self.question, self.reference_answer, list(self.source_docs), self.difficulty]


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    collection: str
    samples: tuple[Sample, ...]
    content_hash: str
    documents: tuple[Document, ...] = field(default=(), repr=False)

    def __len__(self) -> int:
        return len(self.samples)


def dataset_hash(samples) -> str:
    ordered = sorted(samples, key=lambda s: s.sample_id)
    blob = json.dumps([s.canonical() for s in ordered], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _iter_json_array(text: str, start: int = 0) -> Iterator[tuple[int, object]]:
    """Yield (line, element) for a top-level JSON array beginning at ``start``."""
    decoder = json.JSONDecoder()
    ws = re.compile(r"[\s,]*")
    pos = ws.match(text, start).end()
    if pos >= len(text) or text[pos] != "[":
        raise SchemaError("expected a JSON array", _line_of(text, pos))
    pos += 1
    while True:
        pos = ws.match(text, pos).end()
        if pos >= len(text):
            raise SchemaError("unterminated JSON array", _line_of(text, pos))
        if text[pos] == "]":
            return
        try:
            obj, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", _line_of(text, exc.pos)) from exc
        yield _line_of(text, pos), obj
        pos = end


def _require(rec: dict, key: str, line: int) -> object:
    if not isinstance(rec, dict):
        raise SchemaError("record is not an object", line)
    value = rec.get(key)
    if value is None or (isinstance(value, str) and not value.strip()):
        raise MissingField(key, line)
    return value


def _multihop(text: str, name: str, collection: str) -> tuple[list[Sample], list[Document]]:
    samples, docs = [], []
    for line, rec in _iter_json_array(text):
        sid = str(_require(rec, "_id", line))
        question = str(_require(rec, "question", line))
        answer = str(_require(rec, "answer", line))
        context = rec.get("context") or []
        support = []
        for fact in rec.get("supporting_facts") or []:
            if isinstance(fact, (list, tuple)) and fact and fact[0] not in support:
                support.append(str(fact[0]))
        for para in context:
            if not (isinstance(para, (list, tuple)) and len(para) == 2):
                raise SchemaError("context entries must be [title, sentences]", line)
            title, sentences = para
            body = "".join(sentences) if isinstance(sentences, list) else str(sentences)
            if body.strip():
                docs.append(Document(str(title), collection, body, str(title)))
        samples.append(Sample(sid, question, answer, tuple(support), rec.get("level")))
    return samples, docs


def _triviaqa(text: str, collection: str, evidence_dir: Path | None) -> tuple[list[Sample], list[Document]]:
    m = re.search(r'"Data"\s*:\s*', text)
    if not m:
        raise SchemaError('expected an object with a "Data" array', 1)
    samples, docs = [], []
    for line, rec in _iter_json_array(text, m.end()):
        sid = str(_require(rec, "QuestionId", line))
        question = str(_require(rec, "Question", line))
        answer_obj = _require(rec, "Answer", line)
        answer = answer_obj.get("Value") if isinstance(answer_obj, dict) else answer_obj
        if not answer:
            raise MissingField("Answer.Value", line)
        sources = []
        for page in (rec.get("EntityPages") or []) + (rec.get("SearchResults") or []):
            doc_id = page.get("Filename") or page.get("Url") or page.get("Title")
            if not doc_id:
                continue
            sources.append(str(doc_id))
            content = page.get("Content")
            if content is None and evidence_dir is not None and page.get("Filename"):
                for sub in ("", "wikipedia", "web"):
                    candidate = evidence_dir / sub / page["Filename"]
                    if candidate.exists():
                        content = candidate.read_text(encoding="utf-8", errors="replace")
                        break
            if content and content.strip():
                docs.append(Document(str(doc_id), collection, content, page.get("Title") or ""))
        samples.append(Sample(sid, question, str(answer), tuple(dict.fromkeys(sources))))
    return samples, docs


def _jsonl(text: str, collection: str) -> tuple[list[Sample], list[Document]]:
    samples, docs = [], []
    for line, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", line) from exc
        sid = str(_require(rec, "sample_id", line))
        question = str(_require(rec, "question", line))
        answer = str(_require(rec, "answer", line))
        for d in rec.get("documents") or []:
            try:
                docs.append(Document(str(d["doc_id"]), collection, d["text"], d.get("title") or ""))
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"bad document entry: {exc}", line) from exc
        samples.append(Sample(sid, question, answer, tuple(rec.get("source_docs") or ()), rec.get("difficulty")))
    return samples, docs


def load_dataset(path: str | Path, fmt: str, name: str | None = None, collection: str | None = None,
                 evidence_dir: str | Path | None = None) -> DatasetManifest:
    path = Path(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    name = name or (fmt if fmt != "jsonl" else path.stem)
    collection = collection or name
    text = path.read_text(encoding="utf-8")
    if fmt in ("hotpotqa", "2wiki"):
        samples, docs = _multihop(text, name, collection)
    elif fmt == "triviaqa":
        samples, docs = _triviaqa(text, collection, Path(evidence_dir) if evidence_dir else path.parent)
    else:
        samples, docs = _jsonl(text, collection)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate sample ids")
    seen: set[str] = set()
    unique_docs = []
    for d in docs:
        if d.doc_id not in seen:
            seen.add(d.doc_id)
            unique_docs.append(d)
    log.info("loaded %d samples and %d documents from %s", len(samples), len(unique_docs), path)
    return DatasetManifest(name, collection, tuple(samples), dataset_hash(samples), tuple(unique_docs))


def write_jsonl(manifest: DatasetManifest, path: str | Path, with_documents: bool = True) -> None:
    """Serialize to the normalized interchange format. All documents ride on the first line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, s in enumerate(manifest.samples):
            rec = {"sample_id": s.sample_id, "question": s.question, "answer": s.reference_answer,
                   "source_docs": list(s.source_docs), "difficulty": s.difficulty}
            if with_documents and i == 0 and manifest.documents:
                rec["documents"] = [{"doc_id": d.doc_id, "title": d.title, "text": d.text} for d in manifest.documents]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def select_eval_set(manifest: DatasetManifest, n: int | None = None, seed: int = 0) -> list[Sample]:
    """Seeded subset in canonical (sample_id) order; identical on every machine for the same inputs."""
    canonical = sorted(manifest.samples, key=lambda s: s.sample_id)
    if n is None or n == len(canonical):
        subset = canonical
    else:
        if n < 1:
            raise ValueError("n must be positive")
        if n > len(canonical):
            raise InsufficientSamples(f"asked for {n} samples, dataset {manifest.name} has {len(canonical)}")
        picked = set(random.Random(seed).sample(range(len(canonical)), n))
        subset = [s for i, s in enumerate(canonical) if i in picked]
    log.info("eval set: %d samples, hash %s", len(subset), dataset_hash(subset))
    return subset
