"""Embedding providers and exhaustive cosine search."""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import httpx
import numpy as np

from .index import Corpus
from .text import tokenize

HASH_DIM = 64
TIE_DIGITS = 12


class EmbeddingUnavailable(RuntimeError):
    pass


class Embedder(Protocol):
    embedder_id: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic signed feature hashing of unigrams and bigrams.

    Stable across processes and machines (sha256, not Python's salted hash).
    Texts with no tokens map to the zero vector.
    """

    def __init__(self, dim: int = HASH_DIM):
        self.dim = dim
        self.embedder_id = f"hash-{dim}"

    def _features(self, text: str) -> list[str]:
        toks = tokenize(text)
        return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for feat in self._features(text):
            digest = hashlib.sha256(feat.encode("utf-8")).digest()
            slot = int.from_bytes(digest[:4], "little") % self.dim
            vec[slot] += 1.0 if digest[4] & 1 else -1.0
        return vec

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed(t) for t in texts])


class HttpEmbedder:
    """Client for a service taking ``{"texts": [...]}`` and returning ``{"vectors": [[...], ...]}``."""

    def __init__(self, url: str, dim: int, batch_size: int = 64, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.url = url
        self.dim = dim
        self.batch_size = batch_size
        self.embedder_id = f"http:{url}"
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        out = []
        for i in range(0, len(texts), self.batch_size):
            batch = list(texts[i : i + self.batch_size])
            try:
                resp = self._client.post(self.url, json={"texts": batch})
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
            except (httpx.HTTPError, ValueError, KeyError) as exc:
                raise EmbeddingUnavailable(f"embedding service {self.url}: {exc}") from exc
            if len(vectors) != len(batch) or any(len(v) != self.dim for v in vectors):
                raise EmbeddingUnavailable(f"embedding service {self.url} returned wrong shape")
            out.extend(vectors)
        return np.asarray(out, dtype=np.float64).reshape(len(texts), self.dim)


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rank_dense(query: str, corpus: Corpus, embedder: Embedder, k: int | None = 5) -> list[tuple[int, float]]:
    """Exhaustive cosine scan; similarities equal to 12 decimals tie, broken by chunk_id ascending."""
    if corpus.embeddings is None:
        raise EmbeddingUnavailable(f"collection {corpus.collection!r} has no dense index")
    if corpus.embedder_id != embedder.embedder_id:
        raise EmbeddingUnavailable(
            f"collection {corpus.collection!r} embedded with {corpus.embedder_id}, query embedder is {embedder.embedder_id}"
        )
    if len(corpus) == 0:
        return []
    q = np.asarray(embedder.embed(query), dtype=np.float64)
    qn = np.linalg.norm(q)
    sims = corpus.embeddings @ (q / qn) if qn > 0 else np.zeros(len(corpus))
    sims = np.clip(sims, -1.0, 1.0)
    # compare at 1e-12 so float noise cannot override the chunk_id tie rule
    order = sorted(range(len(corpus)), key=lambda i: (-round(float(sims[i]), TIE_DIGITS), corpus.chunks[i].chunk_id))
    if k is not None:
        order = order[:k]
    return [(i, float(sims[i])) for i in order]
