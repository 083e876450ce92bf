import itertools
import math

import pytest
from hypothesis import given, strategies as st

from clickrecon import combinatorics as cb


def partitions_into_blocks(n, k):
    """Brute force: count set partitions of range(n) into exactly k nonempty blocks."""
    if n == 0:
        return 1 if k == 0 else 0
    count = 0
    # label each element with a block; canonical labelings (first use order) are partitions
    for labels in itertools.product(range(k), repeat=n):
        seen = []
        for lab in labels:
            if lab not in seen:
                seen.append(lab)
        if len(seen) == k and seen == list(range(k)):
            count += 1
    return count


def falling_factorial_coeffs(k):
    """Coefficients of x (x-1) ... (x-k+1) in increasing powers, by polynomial multiplication."""
    poly = [1]
    for j in range(k):
        nxt = [0] * (len(poly) + 1)
        for i, c in enumerate(poly):
            nxt[i + 1] += c
            nxt[i] -= j * c
        poly = nxt
    return poly


@pytest.mark.parametrize("n,k,expected", [(4, 2, 6), (7, 0, 1), (0, 0, 1), (4, 5, 0)])
def test_binomial_examples(n, k, expected):
    assert cb.binomial(n, k) == expected


def test_stirling_second_examples_match_enumeration():
    assert partitions_into_blocks(3, 2) == 3
    assert partitions_into_blocks(4, 2) == 7
    assert cb.stirling_second(3, 2) == 3
    assert cb.stirling_second(4, 2) == 7
    for n in range(12):
        assert cb.stirling_second(n, n) == 1


def test_stirling_second_matches_brute_force():
    for n in range(7):
        for k in range(n + 2):
            assert cb.stirling_second(n, k) == partitions_into_blocks(n, k)


def test_stirling_first_examples_match_falling_factorial():
    assert falling_factorial_coeffs(3)[2] == -3
    assert falling_factorial_coeffs(4)[2] == 11
    assert cb.stirling_first_signed(3, 2) == -3
    assert cb.stirling_first_signed(4, 2) == 11
    for k in range(12):
        assert cb.stirling_first_signed(k, k) == 1


def test_stirling_first_matches_polynomial_expansion():
    for k in range(20):
        coeffs = falling_factorial_coeffs(k)
        for m in range(k + 3):
            expected = coeffs[m] if m < len(coeffs) else 0
            assert cb.stirling_first_signed(k, m) == expected


def test_orthogonality_exact():
    for n in range(13):
        for m in range(13):
            total = sum(
                cb.stirling_first_signed(k, m) * cb.stirling_second(n, k) for k in range(13)
            )
            assert total == (1 if n == m else 0)


@pytest.mark.parametrize("bound", [cb.DEFAULT_TABLE_BOUND])
def test_recurrences_hold_up_to_bound(bound):
    s2 = cb.stirling_second_table(bound)
    s1 = cb.stirling_first_table(bound)
    for n in range(1, bound):
        for k in range(1, bound):
            assert s2[n][k] == k * s2[n - 1][k] + s2[n - 1][k - 1]
            assert s1[n][k] == s1[n - 1][k - 1] - (n - 1) * s1[n - 1][k]


def test_cached_tables_equal_fresh_recomputation():
    bound = cb.DEFAULT_TABLE_BOUND
    assert cb.stirling_second_table(bound) == cb.stirling_second_table.__wrapped__(bound)
    assert cb.stirling_first_table(bound) == cb.stirling_first_table.__wrapped__(bound)
    assert cb.stirling_second_table(bound) is cb.stirling_second_table(bound)


def test_values_are_exact_big_integers():
    big = cb.stirling_second(100, 50)
    assert isinstance(big, int) and big > 2**200
    # sum_k {n k} is the Bell number; B_30 is known exactly
    assert sum(cb.stirling_second(30, k) for k in range(31)) == 846749014511809332450147
    # sum_m |s(k, m)| = k!
    assert sum(abs(cb.stirling_first_signed(40, m)) for m in range(41)) == math.factorial(40)


def test_negative_arguments_rejected():
    with pytest.raises(ValueError):
        cb.stirling_second(-1, 0)
    with pytest.raises(ValueError):
        cb.binomial(3, -1)


@given(st.integers(0, 20), st.integers(0, 20))
def test_second_kind_surjection_identity(n, k):
    # k! {n k} counts surjections onto k labels: inclusion-exclusion
    surj = sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1))
    assert math.factorial(k) * cb.stirling_second(n, k) == surj
