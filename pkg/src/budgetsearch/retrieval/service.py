from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Mapping

from .bm25 import rank_bm25
from .dense import Embedder, EmbeddingUnavailable, rank_dense
from .fusion import ScoredChunk, fuse_hybrid
from .index import Corpus, UnknownCollection
from .rerank import Reranker, RerankerUnavailable
from .text import EmptyQuery

log = logging.getLogger(__name__)

FINAL_K = 5
CANDIDATE_POOL = 100


class SearchMode(str, enum.Enum):
    BM25 = "BM25"
    HS = "HS"
    HS_RR = "HS_RR"

    @classmethod
    def parse(cls, value: str | SearchMode) -> SearchMode:
        if isinstance(value, SearchMode):
            return value
        norm = value.strip().upper().replace("+", "_").replace("-", "_")
        return cls(norm)


@dataclass(frozen=True)
class SearchResult:
    query: str
    mode: SearchMode
    chunks: tuple[ScoredChunk, ...]
    fallback: bool = False

    @property
    def observation(self) -> str:
        if not self.chunks:
            return "No results found."
        parts = []
        for i, sc in enumerate(self.chunks, 1):
            c = sc.chunk
            head = f"[{i}] doc: {c.doc_id}"
            if c.title and c.title != c.doc_id:
                head += f" ({c.title})"
            parts.append(f"{head}\n{c.text}")
        return "\n\n".join(parts)


@dataclass
class SearchService:
    """Dispatches queries to the configured pipeline. Read-only after construction."""

    corpora: Mapping[str, Corpus]
    embedder: Embedder | None = None
    reranker: Reranker | None = None
    rerank_fallback: bool = True
    final_k: int = FINAL_K
    pool_size: int = CANDIDATE_POOL

    def corpus(self, collection: str) -> Corpus:
        try:
            return self.corpora[collection]
        except KeyError:
            raise UnknownCollection(collection) from None

    def search_bm25(self, query: str, collection: str, k: int = FINAL_K) -> list[ScoredChunk]:
        corpus = self.corpus(collection)
        try:
            ranked = rank_bm25(query, corpus, k)
        except EmptyQuery:
            return []
        return [ScoredChunk(corpus.chunks[i], lexical_score=s, fused_rank=r) for r, (i, s) in enumerate(ranked, 1)]

    def search_dense(self, query: str, collection: str, k: int = FINAL_K) -> list[ScoredChunk]:
        corpus = self.corpus(collection)
        if self.embedder is None:
            raise EmbeddingUnavailable("no embedder configured")
        ranked = rank_dense(query, corpus, self.embedder, k)
        return [ScoredChunk(corpus.chunks[i], dense_score=s, fused_rank=r) for r, (i, s) in enumerate(ranked, 1)]

    def search_hybrid(self, query: str, collection: str, k: int = FINAL_K) -> list[ScoredChunk]:
        depth = max(k, self.pool_size)
        lexical = self.search_bm25(query, collection, depth)
        dense = self.search_dense(query, collection, depth)
        return fuse_hybrid(lexical, dense, k)

    def rerank_pipeline(self, query: str, collection: str) -> tuple[list[ScoredChunk], bool]:
        """Rerank the hybrid pool and keep the top ``final_k``. Returns (chunks, fell_back)."""
        pool = self.search_hybrid(query, collection, self.pool_size)
        if self.reranker is None:
            raise RerankerUnavailable("no reranker configured")
        try:
            scores = self.reranker.score(query, pool)
        except RerankerUnavailable:
            if not self.rerank_fallback:
                raise
            log.warning("reranker unavailable; falling back to hybrid order for %r", query)
            return pool[: self.final_k], True
        rescored = [replace(sc, rerank_score=float(s)) for sc, s in zip(pool, scores)]
        rescored.sort(key=lambda sc: (-sc.rerank_score, sc.fused_rank))
        return rescored[: self.final_k], False

    def retrieve(self, query: str, collection: str, mode: SearchMode | str) -> SearchResult:
        mode = SearchMode.parse(mode)
        fallback = False
        if mode is SearchMode.BM25:
            chunks = self.search_bm25(query, collection, self.final_k)
        elif mode is SearchMode.HS:
            chunks = self.search_hybrid(query, collection, self.final_k)
        else:
            chunks, fallback = self.rerank_pipeline(query, collection)
        return SearchResult(query, mode, tuple(chunks[: self.final_k]), fallback)

    def search(self, query: str, collection: str, mode: SearchMode | str) -> str:
        return self.retrieve(query, collection, mode).observation

    def bind(self, collection: str, mode: SearchMode | str) -> BoundSearcher:
        self.corpus(collection)
        return BoundSearcher(self, collection, SearchMode.parse(mode))


@dataclass(frozen=True)
class BoundSearcher:
    """A searcher restricted to one collection and mode, as handed to the engine."""

    service: SearchService
    collection: str
    mode: SearchMode

    def retrieve(self, query: str) -> SearchResult:
        return self.service.retrieve(query, self.collection, self.mode)
