"""Exact integer combinatorics behind the channel matrices.

Everything here returns Python ``int`` (arbitrary precision). Stirling
numbers come from immutable triangular tables that are built once per
size bound and cached.
"""
from __future__ import annotations

import math
from functools import lru_cache

DEFAULT_TABLE_BOUND = 64

__all__ = [
    "DEFAULT_TABLE_BOUND",
    "binomial",
    "stirling_second",
    "stirling_first_signed",
    "stirling_second_table",
    "stirling_first_table",
    "table_bound",
]


def table_bound(*indices: int) -> int:
    """Smallest cached bound covering ``indices``: max(index) + 1, at least the default.

    Bounds are rounded up to a power of two so repeated calls with slowly
    growing indices share a handful of tables.
    """
    need = max((int(i) for i in indices), default=0) + 1
    bound = DEFAULT_TABLE_BOUND
    while bound < need:
        bound *= 2
    return bound


@lru_cache(maxsize=None)
def stirling_second_table(bound: int = DEFAULT_TABLE_BOUND) -> tuple[tuple[int, ...], ...]:
    """Rows ``n = 0 .. bound-1`` of {n k}, each of length ``bound``.

    Built from {n k} = k {n-1 k} + {n-1 k-1} with {0 0} = 1.
    """
    if bound < 1:
        raise ValueError("bound must be >= 1")
    rows = [[0] * bound for _ in range(bound)]
    rows[0][0] = 1
    for n in range(1, bound):
        prev, row = rows[n - 1], rows[n]
        for k in range(1, n + 1):
            row[k] = k * prev[k] + prev[k - 1]
    return tuple(tuple(r) for r in rows)


@lru_cache(maxsize=None)
def stirling_first_table(bound: int = DEFAULT_TABLE_BOUND) -> tuple[tuple[int, ...], ...]:
    """Rows ``k = 0 .. bound-1`` of signed s(k, m), each of length ``bound``.

    Built from s(k, m) = s(k-1, m-1) - (k-1) s(k-1, m) with s(0, 0) = 1.
    """
    if bound < 1:
        raise ValueError("bound must be >= 1")
    rows = [[0] * bound for _ in range(bound)]
    rows[0][0] = 1
    for k in range(1, bound):
        prev, row = rows[k - 1], rows[k]
        for m in range(1, k + 1):
            row[m] = prev[m - 1] - (k - 1) * prev[m]
    return tuple(tuple(r) for r in rows)


def _check_nonneg(*values: int) -> None:
    for v in values:
        if int(v) != v or v < 0:
            raise ValueError(f"expected a nonnegative integer, got {v!r}")


def binomial(n: int, k: int) -> int:
    """Exact binomial coefficient; 0 when ``k > n``."""
    _check_nonneg(n, k)
    return math.comb(int(n), int(k))


def stirling_second(n: int, k: int) -> int:
    """Stirling number of the second kind {n k}: partitions of n items into k blocks."""
    _check_nonneg(n, k)
    n, k = int(n), int(k)
    if k > n:
        return 0
    return stirling_second_table(table_bound(n))[n][k]


def stirling_first_signed(k: int, m: int) -> int:
    """Signed Stirling number of the first kind s(k, m).

    These are the coefficients of the falling factorial,
    x (x-1) ... (x-k+1) = sum_m s(k, m) x^m.
    """
    _check_nonneg(k, m)
    k, m = int(k), int(m)
    if m > k:
        return 0
    return stirling_first_table(table_bound(k))[k][m]
