"""Confidence intervals for accuracy and for paired accuracy differences."""

from __future__ import annotations

import math
from typing import Sequence

Z95 = 1.959963985


class DomainError(ValueError):
    pass


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for k successes in n trials.

    The bounds are pinned to exactly 0.0 when k == 0 and 1.0 when k == n, where
    the closed form only reaches them up to rounding.
    """
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not z > 0:
        raise DomainError(f"z must be positive, got {z}")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4 * n * n)) / denom
    low = 0.0 if k == 0 else max(0.0, center - half)
    high = 1.0 if k == n else min(1.0, center + half)
    return low, high


def paired_counts(baseline: Sequence[bool], variant: Sequence[bool]) -> tuple[int, int, int, int]:
    """(both, variant only, baseline only, neither) correct."""
    if len(baseline) != len(variant):
        raise DomainError(f"paired vectors differ in length: {len(baseline)} vs {len(variant)}")
    both = v_only = b_only = neither = 0
    for b, v in zip(baseline, variant):
        if b and v:
            both += 1
        elif v:
            v_only += 1
        elif b:
            b_only += 1
        else:
            neither += 1
    return both, v_only, b_only, neither


def newcombe_paired_interval(baseline: Sequence[bool], variant: Sequence[bool], z: float = Z95) -> tuple[float, float]:
    """Interval for accuracy(variant) - accuracy(baseline) on the same samples.

    Newcombe's paired score method without continuity correction: with
    Wilson intervals (l1, u1) for the variant proportion p1 and (l2, u2) for the
    baseline proportion p2, and phi the correlation of the 2x2 paired table
    (0 when any margin is empty),

        lower = D - sqrt((p1-l1)^2 - 2 phi (p1-l1)(u2-p2) + (u2-p2)^2)
        upper = D + sqrt((u1-p1)^2 - 2 phi (u1-p1)(p2-l2) + (p2-l2)^2)

    where D = p1 - p2.
    """
    e, f, g, h = paired_counts(baseline, variant)
    n = e + f + g + h
    if n < 1:
        raise DomainError("need at least one pair")
    p1, p2 = (e + f) / n, (e + g) / n
    l1, u1 = wilson_interval(e + f, n, z)
    l2, u2 = wilson_interval(e + g, n, z)
    margins = (e + f) * (g + h) * (e + g) * (f + h)
    phi = (e * h - f * g) / math.sqrt(margins) if margins > 0 else 0.0
    d = p1 - p2
    dl = (p1 - l1) ** 2 - 2 * phi * (p1 - l1) * (u2 - p2) + (u2 - p2) ** 2
    du = (u1 - p1) ** 2 - 2 * phi * (u1 - p1) * (p2 - l2) + (p2 - l2) ** 2
    low = d - math.sqrt(max(dl, 0.0))
    high = d + math.sqrt(max(du, 0.0))
    return max(-1.0, low), min(1.0, high)
