"""Compositions (frequency tables) and their multinomial densities.

Enumeration is colexicographic: vectors are ordered by their last entry
first, so for n=2, k=2 the sequence is (2,0), (1,1), (0,2). All densities
are evaluated in log space with the conventions 0**0 = 1 and 0*log(0) = 0.
"""

from __future__ import annotations

import math
from itertools import islice
from typing import Iterator, Optional

import numpy as np
from scipy.special import gammaln

from .errors import IncompatibleComposition, Overflow

INT64_MAX = 2**63 - 1


def count_compositions(n: int, k: int) -> int:
    """Number of weak compositions of n into k parts, C(n+k-1, n)."""
    if n < 0 or k < 1:
        raise ValueError("need n >= 0 and k >= 1")
    return math.comb(n + k - 1, n)


def _checked_count(n: int, k: int) -> int:
    c = count_compositions(n, k)
    if c > INT64_MAX:
        raise Overflow(f"C({n + k - 1}, {n}) does not fit in a 64-bit count")
    return c


def _colex(n: int, k: int, skip: int) -> Iterator[tuple]:
    if k == 1:
        if skip == 0:
            yield (n,)
        return
    for last in range(n + 1):
        block = math.comb(n - last + k - 2, k - 2)
        if skip >= block:
            skip -= block
            continue
        for head in _colex(n - last, k - 1, skip):
            yield head + (last,)
        skip = 0


def enumerate_compositions(
    n: int, k: int, start: int = 0, stop: Optional[int] = None
) -> Iterator[tuple]:
    """Yield weak compositions of n into k parts in colex order.

    ``start``/``stop`` select an index range so that shards of the sequence
    can be processed independently.
    """
    total = _checked_count(n, k)
    stop = total if stop is None else min(stop, total)
    if start >= stop:
        return iter(())
    return islice(_colex(n, k, start), stop - start)


def composition_rank(counts) -> int:
    """Position of ``counts`` in the colex sequence."""
    counts = [int(c) for c in counts]
    n, k = sum(counts), len(counts)
    r = 0
    for j in range(k - 1, 0, -1):
        last = counts[j]
        for v in range(last):
            r += math.comb(n - v + j - 1, j - 1)
        n -= last
    return r


def composition_array(n: int, k: int) -> np.ndarray:
    """All compositions as rows of an int array, colex order."""
    c = _checked_count(n, k)
    if k == 1:
        return np.array([[n]], dtype=np.int64)
    out = np.empty((c, k), dtype=np.int64)
    row = 0
    for last in range(n + 1):
        head = composition_array(n - last, k - 1)
        out[row:row + len(head), :-1] = head
        out[row:row + len(head), -1] = last
        row += len(head)
    return out


def log_multinomial(counts) -> np.ndarray | float:
    """ln(n! / prod counts_j!) along the last axis."""
    c = np.asarray(counts, dtype=float)
    res = gammaln(c.sum(axis=-1) + 1) - gammaln(c + 1).sum(axis=-1)
    return float(res) if np.ndim(res) == 0 else res


def _xlogy_counts(counts: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Sum of counts*log(probs) with 0*log 0 = 0 and -inf where a count hits a zero prob."""
    probs = np.broadcast_to(probs, counts.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(probs)
        terms = np.where(counts > 0, counts * logp, 0.0)
    return terms.sum(axis=-1)


def covariate_composition_pmf(counts, q_l) -> np.ndarray | float:
    """Multinomial probability of the covariate composition (rows allowed)."""
    c = np.asarray(counts, dtype=float)
    q = np.asarray(q_l, dtype=float)
    if c.shape[-1] != q.shape[0]:
        raise IncompatibleComposition(f"composition has {c.shape[-1]} cells, q_l has {q.shape[0]}")
    res = np.exp(log_multinomial(c) + _xlogy_counts(c, q))
    return float(res) if np.ndim(res) == 0 else res


def conditional_covariate_composition_pmf(counts, level: int, q_l) -> np.ndarray | float:
    """Probability of the composition given that one fixed individual sits at ``level``.

    The remaining n-1 individuals are multinomial; rows with a zero count at
    ``level`` are incompatible (raised for a single vector, 0 for arrays).
    """
    c = np.array(counts, dtype=float)
    if c.ndim == 1:
        if c[level] < 1:
            raise IncompatibleComposition(f"composition has no individual at level {level}")
        c[level] -= 1
        return covariate_composition_pmf(c, q_l)
    ok = c[:, level] >= 1
    c[:, level] = np.maximum(c[:, level] - 1, 0)
    return np.where(ok, covariate_composition_pmf(c, q_l), 0.0)


def outcome_composition_pmf(o, b, q_y) -> float:
    """Probability of outcome table ``o[a, l, y]`` given joint table ``b[a, l]``.

    A product over (a, l) cells of multinomials with probabilities q_y[a, l, :].
    """
    o = np.asarray(o, dtype=float)
    b = np.asarray(b, dtype=float)
    q_y = np.asarray(q_y, dtype=float)
    if o.shape != q_y.shape or b.shape != q_y.shape[:2]:
        raise IncompatibleComposition("shape mismatch between o, b and q_y")
    if not np.array_equal(o.sum(axis=-1), b):
        raise IncompatibleComposition("outcome table margins do not match the joint table")
    logp = log_multinomial(o) + _xlogy_counts(o, q_y)
    return float(np.exp(np.sum(logp)))
