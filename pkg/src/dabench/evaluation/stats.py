"""Gap closure and the exact paired sign test."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

__all__ = [
    "GapClosure",
    "gap_closure",
    "binomial_upper_tail",
    "SignTestResult",
    "paired_sign_test",
    "SIGNIFICANCE_LEVEL",
    "TIE_TOLERANCE",
]

SIGNIFICANCE_LEVEL = 0.1
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GapClosure:
    d: float
    d_b: float
    d_o: float
    defined: bool
    d_r: float | None = None


def gap_closure(d: float, d_b: float, d_o: float, eps: float = 1e-6) -> GapClosure:
    """Share of the baseline-to-oracle gap that score ``d`` closes.

    ``d_r = (d - d_b) / (d_o - d_b)``; undefined when ``|d_o - d_b| <= eps``.
    """
    gap = d_o - d_b
    if abs(gap) <= eps:
        return GapClosure(d, d_b, d_o, defined=False)
    return GapClosure(d, d_b, d_o, defined=True, d_r=(d - d_b) / gap)


def binomial_upper_tail(k: int, n: int) -> float:
    """P(X >= k) for X ~ Binomial(n, 1/2), computed exactly."""
    if n < 0 or k < 0:
        raise ValueError("k and n must be non-negative")
    if k > n:
        return 0.0
    return sum(comb(n, i) for i in range(k, n + 1)) / 2**n


@dataclass(frozen=True)
class SignTestResult:
    p_value: float
    n_effective: int
    wins_a: int
    wins_b: int
    winner: str | None  # "a", "b" or None

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def _align(scores_a, scores_b):
    if isinstance(scores_a, dict) or isinstance(scores_b, dict):
        if not (isinstance(scores_a, dict) and isinstance(scores_b, dict)):
            raise ValueError("both score collections must be keyed by case id")
        if set(scores_a) != set(scores_b):
            unmatched = sorted(set(scores_a) ^ set(scores_b))
            raise ValueError(f"unmatched case ids: {unmatched}")
        keys = sorted(scores_a)
        return (np.array([scores_a[k] for k in keys], dtype=float),
                np.array([scores_b[k] for k in keys], dtype=float))
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score vectors must be 1D and equal length, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ValueError("score vectors must not be empty")
    return a, b


def paired_sign_test(scores_a, scores_b) -> SignTestResult:
    """Exact one-sided sign test for the method with more per-case wins.

    Scores are equal-length sequences, or dicts keyed by case id. Ties
    (``|a - b| <= 1e-12``) are dropped. The p-value is the binomial tail
    ``P(X >= wins of the leader)`` under a fair coin; with no untied pairs it
    is 1 and there is no winner.
    """
    a, b = _align(scores_a, scores_b)
    diff = a - b
    untied = np.abs(diff) > TIE_TOLERANCE
    n = int(untied.sum())
    wins_a = int((diff[untied] > 0).sum())
    wins_b = n - wins_a
    if n == 0:
        return SignTestResult(1.0, 0, 0, 0, None)
    lead = max(wins_a, wins_b)
    winner = None if wins_a == wins_b else ("a" if wins_a > wins_b else "b")
    return SignTestResult(binomial_upper_tail(lead, n), n, wins_a, wins_b, winner)
