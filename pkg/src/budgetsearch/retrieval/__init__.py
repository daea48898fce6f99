from .bm25 import rank_bm25, score_bm25
from .dense import EmbeddingUnavailable, HashEmbedder, HttpEmbedder, cosine, rank_dense
from .fusion import ScoredChunk, fuse_hybrid
from .index import (
    Chunk,
    Corpus,
    Document,
    IndexCorrupt,
    UnknownCollection,
    build_corpus,
    chunk_documents,
    load_corpus,
    save_corpus,
)
from .rerank import HttpReranker, IdentityReranker, RerankerUnavailable, SubstringReranker, make_reranker
from .service import BoundSearcher, SearchMode, SearchResult, SearchService
from .text import EmptyQuery, ParsedQuery, parse_query, tokenize

__all__ = [
    "BoundSearcher", "Chunk", "Corpus", "Document", "EmbeddingUnavailable", "EmptyQuery", "HashEmbedder",
    "HttpEmbedder", "HttpReranker", "IdentityReranker", "IndexCorrupt", "ParsedQuery", "RerankerUnavailable",
    "ScoredChunk", "SearchMode", "SearchResult", "SearchService", "SubstringReranker", "UnknownCollection",
    "build_corpus", "chunk_documents", "cosine", "fuse_hybrid", "load_corpus", "make_reranker", "parse_query",
    "rank_bm25", "rank_dense", "save_corpus", "score_bm25", "tokenize",
]
