"""Search-call and completion-token accounting for a single trajectory."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Union

# Counters saturate here so they stay representable as signed 64-bit ints downstream.
COUNTER_MAX = 2**63 - 1


class Unlimited(enum.Enum):
    UNLIMITED = "unlimited"

    def __str__(self) -> str:
        return "unlimited"


UNLIMITED = Unlimited.UNLIMITED

SearchCap = Union[int, Unlimited]


class BudgetViolation(RuntimeError):
    """A search was charged after the allowance ran out (an engine bug)."""


def parse_search_cap(value: object) -> SearchCap:
    if value is UNLIMITED:
        return UNLIMITED
    if isinstance(value, str):
        if value.strip().lower() in ("unlimited", "inf", "none"):
            return UNLIMITED
        value = int(value)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"max_searches must be a positive integer or 'unlimited', got {value!r}")
    return value


@dataclass(frozen=True)
class BudgetConfig:
    max_searches: SearchCap = UNLIMITED
    max_total_tokens: int = 16_000

    def __post_init__(self) -> None:
        if self.max_searches is not UNLIMITED:
            if isinstance(self.max_searches, bool) or not isinstance(self.max_searches, int):
                raise ValueError(f"max_searches must be int or UNLIMITED, got {self.max_searches!r}")
            if self.max_searches < 1:
                raise ValueError("max_searches must be >= 1 when bounded")
        if isinstance(self.max_total_tokens, bool) or not isinstance(self.max_total_tokens, int):
            raise ValueError(f"max_total_tokens must be int, got {self.max_total_tokens!r}")
        if self.max_total_tokens < 1:
            raise ValueError("max_total_tokens must be >= 1")

    @property
    def unlimited_searches(self) -> bool:
        return self.max_searches is UNLIMITED

    def to_dict(self) -> dict:
        return {"max_searches": str(self.max_searches) if self.unlimited_searches else self.max_searches,
                "max_total_tokens": self.max_total_tokens}


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError(f"token counts must be non-negative: {self}")

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(self.prompt_tokens + other.prompt_tokens,
                          self.completion_tokens + other.completion_tokens)


def _sat_add(a: int, b: int) -> tuple[int, bool]:
    total = a + b
    if total > COUNTER_MAX:
        return COUNTER_MAX, True
    return total, False


@dataclass
class BudgetLedger:
    """Mutable per-trajectory ledger.

    The search allowance is pre-paid: ``can_search`` is consulted before the
    tool is offered and ``charge_search`` refuses to go past the cap. Tokens are
    post-paid: usage is added after each model call and ``token_exhausted``
    reports whether the threshold has been reached, so the last turn may
    overshoot.
    """

    config: BudgetConfig
    searches_used: int = 0
    completion_tokens_used: int = 0
    prompt_tokens_used: int = 0
    saturated: bool = field(default=False)

    def charge_turn(self, usage: TokenUsage) -> BudgetLedger:
        self.completion_tokens_used, s1 = _sat_add(self.completion_tokens_used, usage.completion_tokens)
        self.prompt_tokens_used, s2 = _sat_add(self.prompt_tokens_used, usage.prompt_tokens)
        self.saturated = self.saturated or s1 or s2
        return self

    def charge_search(self) -> BudgetLedger:
        if not self.can_search:
            raise BudgetViolation(
                f"search charged with {self.searches_used}/{self.config.max_searches} already used"
            )
        self.searches_used, sat = _sat_add(self.searches_used, 1)
        self.saturated = self.saturated or sat
        return self

    @property
    def can_search(self) -> bool:
        cap = self.config.max_searches
        return cap is UNLIMITED or self.searches_used < cap

    @property
    def token_exhausted(self) -> bool:
        return self.completion_tokens_used >= self.config.max_total_tokens

    @property
    def searches_remaining(self) -> SearchCap:
        cap = self.config.max_searches
        if cap is UNLIMITED:
            return UNLIMITED
        return max(cap - self.searches_used, 0)

    @property
    def tokens_remaining(self) -> int:
        return max(self.config.max_total_tokens - self.completion_tokens_used, 0)

    def snapshot(self) -> dict:
        return {
            **self.config.to_dict(),
            "searches_used": self.searches_used,
            "completion_tokens_used": self.completion_tokens_used,
            "prompt_tokens_used": self.prompt_tokens_used,
            "saturated": self.saturated,
        }
