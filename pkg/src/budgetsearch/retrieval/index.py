"""Chunking, per-collection corpora, and the on-disk index format."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .text import tokenize

log = logging.getLogger(__name__)

CHUNK_SIZE = 300
CHUNK_OVERLAP = 50
INDEX_FORMAT_VERSION = 1


class UnknownCollection(KeyError):
    pass


class IndexCorrupt(RuntimeError):
    pass


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    collection: str
    text: str
    token_count: int
    title: str = ""
    start: int = 0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"chunk {self.chunk_id} has empty text")
        if self.token_count < 1:
            raise ValueError(f"chunk {self.chunk_id} has token_count < 1")

    @property
    def search_text(self) -> str:
        return f"{self.title}\n{self.text}" if self.title else self.text


@dataclass(frozen=True)
class Document:
    doc_id: str
    collection: str
    text: str
    title: str = ""


def chunk_documents(
    doc: str,
    doc_id: str,
    collection: str,
    title: str = "",
    size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
) -> list[Chunk]:
    """Split on whitespace into windows of ``size`` tokens that share ``overlap`` tokens."""
    if not 0 <= overlap < size:
        raise ValueError("need 0 <= overlap < size")
    words = doc.split()
    if not words:
        raise ValueError(f"document {doc_id!r} is empty")
    stride = size - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + size, len(words))
        piece = words[start:end]
        chunks.append(Chunk(f"{doc_id}#{len(chunks)}", doc_id, collection, " ".join(piece), len(piece), title, start))
        if end >= len(words):
            return chunks
        start += stride


def reconstruct(chunks: list[Chunk]) -> str:
    """Inverse of chunk_documents up to whitespace normalization."""
    words: list[str] = []
    for ch in sorted(chunks, key=lambda c: c.start):
        words.extend(ch.text.split()[len(words) - ch.start :])
    return " ".join(words)


@dataclass
class CorpusStats:
    n_chunks: int
    avg_len: float
    doc_freq: Mapping[str, int]

    def __post_init__(self) -> None:
        if self.avg_len <= 0:
            self.avg_len = 1.0


@dataclass
class Corpus:
    """Immutable chunk set for one collection plus its inverted and dense indices."""

    collection: str
    chunks: tuple[Chunk, ...]
    embeddings: np.ndarray | None = None
    embedder_id: str | None = None
    tokens: tuple[tuple[str, ...], ...] = field(init=False, repr=False)
    postings: dict[str, dict[int, tuple[int, ...]]] = field(init=False, repr=False)
    stats: CorpusStats = field(init=False, repr=False)
    _phrase_df: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        ids = [c.chunk_id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate chunk ids in collection {self.collection!r}")
        for c in self.chunks:
            if c.collection != self.collection:
                raise ValueError(f"chunk {c.chunk_id} belongs to {c.collection!r}, not {self.collection!r}")
        self.tokens = tuple(tuple(tokenize(c.search_text)) for c in self.chunks)
        postings: dict[str, dict[int, list[int]]] = {}
        for idx, toks in enumerate(self.tokens):
            for pos, tok in enumerate(toks):
                postings.setdefault(tok, {}).setdefault(idx, []).append(pos)
        self.postings = {t: {i: tuple(p) for i, p in d.items()} for t, d in postings.items()}
        n = len(self.chunks)
        avg = sum(len(t) for t in self.tokens) / n if n else 1.0
        self.stats = CorpusStats(n, avg, {t: len(d) for t, d in self.postings.items()})
        if self.embeddings is not None and self.embeddings.shape[0] != n:
            raise ValueError("embedding matrix does not match chunk count")

    def __len__(self) -> int:
        return len(self.chunks)

    def phrase_positions(self, gram: tuple[str, ...], idx: int) -> list[int]:
        """Start positions of ``gram`` in chunk ``idx`` via positional intersection."""
        first = self.postings.get(gram[0], {}).get(idx)
        if not first:
            return []
        starts = set(first)
        for offset, term in enumerate(gram[1:], 1):
            pos = self.postings.get(term, {}).get(idx)
            if not pos:
                return []
            starts &= {p - offset for p in pos}
            if not starts:
                return []
        return sorted(starts)

    def phrase_doc_freq(self, gram: tuple[str, ...]) -> int:
        cached = self._phrase_df.get(gram)
        if cached is not None:
            return cached
        candidates = set(self.postings.get(gram[0], {}))
        for term in gram[1:]:
            candidates &= set(self.postings.get(term, {}))
        df = sum(1 for idx in candidates if self.phrase_positions(gram, idx))
        self._phrase_df[gram] = df
        return df

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in self.chunks:
            h.update(json.dumps(asdict(c), sort_keys=True, ensure_ascii=False).encode())
            h.update(b"\n")
        if self.embeddings is not None:
            h.update(str(self.embedder_id).encode())
            h.update(np.ascontiguousarray(self.embeddings, dtype=np.float64).tobytes())
        return h.hexdigest()


def build_corpus(collection: str, documents: Iterable[Document], embedder=None,
                 size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> Corpus:
    chunks: list[Chunk] = []
    seen: set[str] = set()
    for doc in documents:
        if doc.collection != collection:
            continue
        if doc.doc_id in seen:
            continue
        seen.add(doc.doc_id)
        if not doc.text.split():
            log.warning("skipping empty document %s", doc.doc_id)
            continue
        chunks.extend(chunk_documents(doc.text, doc.doc_id, collection, doc.title, size, overlap))
    corpus = Corpus(collection, tuple(chunks))
    if embedder is not None:
        corpus = embed_corpus(corpus, embedder)
    return corpus


def embed_corpus(corpus: Corpus, embedder) -> Corpus:
    from .dense import normalize_rows

    vectors = embedder.embed_many([c.search_text for c in corpus.chunks]) if corpus.chunks else np.zeros((0, embedder.dim))
    return Corpus(corpus.collection, corpus.chunks, normalize_rows(np.asarray(vectors, dtype=np.float64)),
                  embedder.embedder_id)


# --------------------------------------------------------------------------- persistence


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    out = Path(root) / corpus.collection
    out.mkdir(parents=True, exist_ok=True)
    with (out / "chunks.jsonl").open("w", encoding="utf-8") as fh:
        for c in corpus.chunks:
            fh.write(json.dumps(asdict(c), ensure_ascii=False, sort_keys=True) + "\n")
    postings = {t: [[i, list(p)] for i, p in sorted(d.items())] for t, d in sorted(corpus.postings.items())}
    (out / "postings.json").write_text(json.dumps(postings, ensure_ascii=False), encoding="utf-8")
    if corpus.embeddings is not None:
        np.save(out / "embeddings.npy", corpus.embeddings)
    manifest = {
        "format_version": INDEX_FORMAT_VERSION,
        "collection": corpus.collection,
        "n_chunks": len(corpus),
        "avg_len": corpus.stats.avg_len,
        "embedder_id": corpus.embedder_id,
        "digest": corpus.digest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_corpus(root: str | Path, collection: str, embedder_id: str | None = None) -> Corpus:
    """Load and verify a persisted collection; raises IndexCorrupt on any mismatch."""
    path = Path(root) / collection
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format_version") != INDEX_FORMAT_VERSION:
            raise IndexCorrupt(f"index format {manifest.get('format_version')} != {INDEX_FORMAT_VERSION}")
        if embedder_id is not None and manifest.get("embedder_id") != embedder_id:
            raise IndexCorrupt(f"index built with embedder {manifest.get('embedder_id')}, wanted {embedder_id}")
        with (path / "chunks.jsonl").open(encoding="utf-8") as fh:
            chunks = tuple(Chunk(**json.loads(line)) for line in fh if line.strip())
        emb_path = path / "embeddings.npy"
        embeddings = np.load(emb_path) if emb_path.exists() else None
        corpus = Corpus(collection, chunks, embeddings, manifest.get("embedder_id") if embeddings is not None else None)
        stored = json.loads((path / "postings.json").read_text(encoding="utf-8"))
        rebuilt = {t: [[i, list(p)] for i, p in sorted(d.items())] for t, d in sorted(corpus.postings.items())}
    except IndexCorrupt:
        raise
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise IndexCorrupt(f"cannot read index at {path}: {exc}") from exc
    if stored != rebuilt:
        raise IndexCorrupt(f"postings at {path} do not match chunks")
    if corpus.digest() != manifest.get("digest"):
        raise IndexCorrupt(f"digest mismatch at {path}")
    return corpus


def read_corpus_jsonl(path: str | Path) -> list[Document]:
    """Ingestion format: one ``{doc_id, collection, title, text}`` object per line."""
    docs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(Document(str(rec["doc_id"]), str(rec["collection"]), rec["text"], rec.get("title") or ""))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
    return docs
