from __future__ import annotations

from dataclasses import dataclass, replace

from .index import Chunk

RRF_K = 60


@dataclass(frozen=True)
class ScoredChunk:
    chunk: Chunk
    lexical_score: float | None = None
    dense_score: float | None = None
    fused_rank: int = 1
    rerank_score: float | None = None
    fused_score: float | None = None

    @property
    def chunk_id(self) -> str:
        return self.chunk.chunk_id


def fuse_hybrid(lexical: list[ScoredChunk], dense: list[ScoredChunk], k: int | None = 5,
                rrf_k: int = RRF_K) -> list[ScoredChunk]:
    """Equal-weight reciprocal-rank fusion over the union of both ranked lists.

    Only list positions matter, so raw score scales never interact.
    """
    fused: dict[str, float] = {}
    by_id: dict[str, ScoredChunk] = {}
    for ranked, attr in ((lexical, "lexical_score"), (dense, "dense_score")):
        for rank, sc in enumerate(ranked, 1):
            cid = sc.chunk_id
            fused[cid] = fused.get(cid, 0.0) + 1.0 / (rrf_k + rank)
            base = by_id.get(cid, ScoredChunk(sc.chunk))
            by_id[cid] = replace(base, **{attr: getattr(sc, attr)})
    order = sorted(fused, key=lambda cid: (-fused[cid], cid))
    if k is not None:
        order = order[:k]
    return [replace(by_id[cid], fused_rank=i, fused_score=fused[cid]) for i, cid in enumerate(order, 1)]
