from __future__ import annotations

import re
from dataclasses import dataclass

_TOKEN = re.compile(r"[^\W_]+")

# Used only to drop phrases made entirely of function words.
STOPWORDS = frozenset(
    """a an and are as at be but by for from had has have he her his i if in into is it its of on or
    she so than that the their them then there these they this to was we were what when where which
    who whom why will with you your""".split()
)

BIGRAM_BOOST = 1.5
TRIGRAM_BOOST = 2.0


class EmptyQuery(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; punctuation and underscores split tokens."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Phrase:
    terms: tuple[str, ...]
    boost: float

    @property
    def text(self) -> str:
        return " ".join(self.terms)


@dataclass(frozen=True)
class ParsedQuery:
    terms: tuple[str, ...]
    phrases: tuple[Phrase, ...]

    @property
    def unique_terms(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.terms))


def parse_query(query: str) -> ParsedQuery:
    terms = tuple(tokenize(query))
    if not terms:
        raise EmptyQuery(f"query has no searchable terms: {query!r}")
    phrases: dict[tuple[str, ...], Phrase] = {}
    for n, boost in ((2, BIGRAM_BOOST), (3, TRIGRAM_BOOST)):
        for i in range(len(terms) - n + 1):
            gram = terms[i : i + n]
            if all(t in STOPWORDS for t in gram) or gram in phrases:
                continue
            phrases[gram] = Phrase(gram, boost)
    return ParsedQuery(terms, tuple(phrases.values()))


def count_phrase(tokens: list[str] | tuple[str, ...], gram: tuple[str, ...]) -> int:
    """Contiguous (possibly overlapping) occurrences of ``gram`` in ``tokens``."""
    n = len(gram)
    return sum(1 for i in range(len(tokens) - n + 1) if tuple(tokens[i : i + n]) == gram)
