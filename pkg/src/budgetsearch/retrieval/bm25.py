"""BM25 with boosted contiguous-phrase virtual terms.

A chunk's score is the classic BM25 sum over the distinct query terms, plus one
virtual term per query bigram/trigram whose frequency is the number of
contiguous occurrences in the chunk and whose document frequency is the number
of chunks containing it at least once. Phrase contributions are multiplied by
the phrase's boost. Terms are summed first, in query order, then phrases.
"""

from __future__ import annotations

import math

from .index import Chunk, Corpus, CorpusStats
from .text import ParsedQuery, count_phrase, parse_query, tokenize

K1 = 1.2
B = 0.75


def idf(df: int, n: int) -> float:
    # Lucene-style smoothing keeps idf > 0 even for terms in every chunk.
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def term_score(tf: int, dl: int, avg_len: float, idf_value: float, k1: float = K1, b: float = B) -> float:
    if tf <= 0:
        return 0.0
    return idf_value * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avg_len))


def score_bm25(query: ParsedQuery, chunk: Chunk, corpus: Corpus) -> float:
    """Score one chunk against its own corpus statistics."""
    tokens = tokenize(chunk.search_text)
    stats: CorpusStats = corpus.stats
    dl = len(tokens)
    score = 0.0
    for term in query.unique_terms:
        tf = tokens.count(term)
        if tf:
            score += term_score(tf, dl, stats.avg_len, idf(stats.doc_freq.get(term, 0), stats.n_chunks))
    for phrase in query.phrases:
        tf = count_phrase(tokens, phrase.terms)
        if tf:
            score += phrase.boost * term_score(tf, dl, stats.avg_len, idf(corpus.phrase_doc_freq(phrase.terms), stats.n_chunks))
    return score


def bm25_scores(query: ParsedQuery, corpus: Corpus) -> dict[int, float]:
    """Scores for every chunk matching at least one query term, via the inverted index."""
    stats = corpus.stats
    n = stats.n_chunks
    candidates: set[int] = set()
    for term in query.unique_terms:
        candidates.update(corpus.postings.get(term, ()))
    term_idf = {t: idf(stats.doc_freq.get(t, 0), n) for t in query.unique_terms}
    phrase_idf = {p.terms: idf(corpus.phrase_doc_freq(p.terms), n) for p in query.phrases}
    scores: dict[int, float] = {}
    for idx in candidates:
        dl = len(corpus.tokens[idx])
        score = 0.0
        for term in query.unique_terms:
            positions = corpus.postings.get(term, {}).get(idx)
            if positions:
                score += term_score(len(positions), dl, stats.avg_len, term_idf[term])
        for phrase in query.phrases:
            tf = len(corpus.phrase_positions(phrase.terms, idx))
            if tf:
                score += phrase.boost * term_score(tf, dl, stats.avg_len, phrase_idf[phrase.terms])
        scores[idx] = score
    return scores


def rank_bm25(query: str | ParsedQuery, corpus: Corpus, k: int | None = 5) -> list[tuple[int, float]]:
    """Top-k (chunk index, score) pairs with score > 0; ties by chunk_id ascending."""
    parsed = parse_query(query) if isinstance(query, str) else query
    scores = bm25_scores(parsed, corpus)
    ranked = sorted(((i, s) for i, s in scores.items() if s > 0),
                    key=lambda item: (-item[1], corpus.chunks[item[0]].chunk_id))
    return ranked if k is None else ranked[:k]
