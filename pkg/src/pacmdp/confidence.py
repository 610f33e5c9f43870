"""Confidence radii for a Bernoulli parameter estimated from ``n`` draws.

All radii take ``log_term`` = log(2/δ) and return ``math.inf`` when no
samples have been seen (the parameter is unconstrained).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

UNCONSTRAINED = math.inf


@dataclass(frozen=True)
class ConfidenceQuery:
    prob: float
    count: int
    log_term: float

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob {self.prob} outside [0, 1]")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not self.log_term > 0.0:
            raise ValueError("log_term must be positive")


def hoeffding_radius(q: ConfidenceQuery) -> float:
    if q.count == 0:
        return UNCONSTRAINED
    return math.sqrt(q.log_term / (2.0 * q.count))


def bernstein_radius(q: ConfidenceQuery) -> float:
    if q.count == 0:
        return UNCONSTRAINED
    n, L = q.count, q.log_term
    return math.sqrt(2.0 * L * q.prob * (1.0 - q.prob) / n) + 2.0 * L / (3.0 * n)


def confidence_radius(q: ConfidenceQuery) -> float:
    """The smaller of the Bernstein and Hoeffding radii."""
    return min(bernstein_radius(q), hoeffding_radius(q))


def combined_radius(q: ConfidenceQuery) -> float:
    """Bound on |p - p̃| when p and p̃ both lie in the interval around the same p̂.

    ``q.prob`` is p̃.
    """
    if q.count == 0:
        return UNCONSTRAINED
    n, L, p = q.count, q.log_term, q.prob
    return math.sqrt(8.0 * L * p * (1.0 - p) / n) + 2.0 * (L / n) ** 0.75 + 4.0 * L / (3.0 * n)


def radius(prob: float, count: int, log_term: float) -> float:
    """Shorthand for ``confidence_radius(ConfidenceQuery(prob, count, log_term))``."""
    if count == 0:
        return UNCONSTRAINED
    hoeffding = math.sqrt(log_term / (2.0 * count))
    bernstein = math.sqrt(2.0 * log_term * prob * (1.0 - prob) / count) + 2.0 * log_term / (3.0 * count)
    return min(bernstein, hoeffding)
