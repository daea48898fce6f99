import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from budgetsearch.stats import Z95, DomainError, newcombe_paired_interval, paired_counts, wilson_interval
from oracles import newcombe_mp, wilson_mp


def test_boundaries_are_exact():
    assert wilson_interval(0, 10, 1.96)[0] == 0.0
    assert wilson_interval(10, 10, 1.96)[1] == 1.0


def test_k8_n10_against_reference():
    lo, hi = wilson_interval(8, 10, 1.96)
    ref = wilson_mp(8, 10, 1.96)
    assert abs(lo - ref[0]) <= 1e-12 and abs(hi - ref[1]) <= 1e-12


def test_k8_n10_frozen():
    # 50-digit evaluation of the quadratic-root form, rounded to 15 significant digits
    lo, hi = wilson_interval(8, 10, 1.96)
    assert lo == pytest.approx(0.490156846720723, abs=1e-12)
    assert hi == pytest.approx(0.943319052019307, abs=1e-12)


@pytest.mark.parametrize("k,n,z", [(-1, 5, 1.96), (6, 5, 1.96), (0, 0, 1.96), (1, 2, 0.0)])
def test_domain_errors(k, n, z):
    with pytest.raises(DomainError):
        wilson_interval(k, n, z)


@given(n=st.integers(1, 50), data=st.data())
def test_wilson_contains_point_and_stays_in_unit(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


@given(num=st.integers(1, 9), scale=st.integers(1, 30))
def test_width_shrinks_with_n(num, scale):
    n1, n2 = 10 * scale, 10 * (scale + 1)
    k1, k2 = num * scale, num * (scale + 1)
    w1 = wilson_interval(k1, n1)[1] - wilson_interval(k1, n1)[0]
    w2 = wilson_interval(k2, n2)[1] - wilson_interval(k2, n2)[0]
    assert w2 < w1


def test_paired_counts_and_length_mismatch():
    assert paired_counts([True, True, False, False], [True, False, True, False]) == (1, 1, 1, 1)
    with pytest.raises(DomainError):
        newcombe_paired_interval([True], [True, False])
    with pytest.raises(DomainError):
        newcombe_paired_interval([], [])


def test_identical_vectors_symmetric():
    v = [True] * 7 + [False] * 5
    lo, hi = newcombe_paired_interval(v, v)
    assert lo < 0 < hi and lo == pytest.approx(-hi, abs=1e-15)


def test_all_flip_to_correct():
    lo, hi = newcombe_paired_interval([False] * 10, [True] * 10)
    assert hi == 1.0 and lo <= 1.0


def _vectors(e, f, g, h):
    base = [True] * e + [False] * f + [True] * g + [False] * h
    var = [True] * e + [True] * f + [False] * g + [False] * h
    return base, var


@pytest.mark.parametrize("table", [(10, 2, 2, 6), (12, 3, 1, 4), (5, 0, 0, 5), (0, 4, 0, 16), (30, 8, 2, 60)])
def test_newcombe_matches_oracle(table):
    base, var = _vectors(*table)
    lo, hi = newcombe_paired_interval(base, var)
    ref = newcombe_mp(*table, Z95)
    assert abs(lo - ref[0]) <= 1e-9 and abs(hi - ref[1]) <= 1e-9


@given(e=st.integers(0, 30), f=st.integers(0, 30), g=st.integers(0, 30), h=st.integers(0, 30))
def test_newcombe_contains_point_difference(e, f, g, h):
    if e + f + g + h == 0:
        return
    base, var = _vectors(e, f, g, h)
    lo, hi = newcombe_paired_interval(base, var)
    d = (f - g) / (e + f + g + h)
    assert -1.0 <= lo <= d + 1e-12 and d - 1e-12 <= hi <= 1.0


def test_zero_correlation_limit_matches_independent_combination():
    # phi = 0 (balanced table): the interval is the square-root combination of both Wilson half-widths
    e, f, g, h = 5, 5, 5, 5
    base, var = _vectors(e, f, g, h)
    lo, hi = newcombe_paired_interval(base, var)
    l1, u1 = wilson_interval(10, 20)
    width = math.sqrt((0.5 - l1) ** 2 + (u1 - 0.5) ** 2)
    assert lo == pytest.approx(-width, abs=1e-15) and hi == pytest.approx(width, abs=1e-15)
