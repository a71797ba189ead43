"""Summary statistics used in the latency tables."""

from __future__ import annotations

import math
from typing import Iterable, NamedTuple


class EmptyInput(ValueError):
    pass


class Summary(NamedTuple):
    mean: float
    variance: float  # unbiased, ms^2 for ms samples
    p95: float  # nearest rank

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def nearest_rank(sorted_samples, q_percent: int) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    n = len(sorted_samples)
    k = max(1, -(-q_percent * n // 100))
    return sorted_samples[k - 1]


def stats(samples: Iterable[float]) -> Summary:
    xs = [float(x) for x in samples]
    n = len(xs)
    if n == 0:
        raise EmptyInput("stats() needs at least one sample")
    if not all(math.isfinite(x) for x in xs):
        raise ValueError("samples must be finite")
    mean = math.fsum(xs) / n
    variance = math.fsum((x - mean) ** 2 for x in xs) / (n - 1) if n > 1 else 0.0
    return Summary(mean, variance, nearest_rank(sorted(xs), 95))
