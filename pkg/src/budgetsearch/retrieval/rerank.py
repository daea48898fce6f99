"""Second-stage rerankers over a hybrid candidate pool."""

from __future__ import annotations

from typing import Protocol, Sequence

import httpx

from .fusion import ScoredChunk


class RerankerUnavailable(RuntimeError):
    pass


class Reranker(Protocol):
    reranker_id: str

    def score(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]: ...


class SubstringReranker:
    """1.0 for candidates whose text contains the query (case-insensitive), else 0.0."""

    reranker_id = "substring"

    def score(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]:
        q = query.lower()
        return [1.0 if q in c.chunk.text.lower() else 0.0 for c in candidates]


class IdentityReranker:
    """Scores by negated hybrid rank, so it preserves the hybrid order."""

    reranker_id = "identity"

    def score(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]:
        return [-float(c.fused_rank) for c in candidates]


class HttpReranker:
    """Cross-encoder service client: ``{"query", "texts"}`` in, ``{"scores": [...]}`` out."""

    def __init__(self, url: str, timeout: float = 60.0, client: httpx.Client | None = None):
        self.url = url
        self.reranker_id = f"http:{url}"
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]:
        texts = [c.chunk.search_text for c in candidates]
        try:
            resp = self._client.post(self.url, json={"query": query, "texts": texts})
            resp.raise_for_status()
            scores = [float(s) for s in resp.json()["scores"]]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise RerankerUnavailable(f"reranker {self.url}: {exc}") from exc
        if len(scores) != len(texts):
            raise RerankerUnavailable(f"reranker {self.url} returned {len(scores)} scores for {len(texts)} texts")
        return scores


def make_reranker(spec: str | None) -> Reranker | None:
    if not spec:
        return None
    if spec == "substring":
        return SubstringReranker()
    if spec == "identity":
        return IdentityReranker()
    if spec.startswith(("http://", "https://")):
        return HttpReranker(spec)
    raise ValueError(f"unknown reranker spec {spec!r}")
