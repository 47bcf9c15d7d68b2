"""Elementary entropy and log-space helpers.

Tail probabilities in this package are carried as natural logarithms; the
linear value is only produced at the boundary through probability_from_log.
"""
import math
from typing import Sequence

import numpy as np
from scipy.stats import entropy as _shannon

from src.errors import DomainError, RangeLimitError
from src.schema_models import require_prime

EXACT_HAMMING_LIMIT = 40


def d_ary_entropy(x: float, d: int) -> float:
    """h_d(x) = x log_d(d-1) - x log_d x - (1-x) log_d(1-x), with 0 log 0 := 0."""
    d = require_prime(d)
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise DomainError(f"h_d is defined on [0,1], got x={x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return math.log(d - 1) / math.log(d)
    value = (x * math.log(d - 1) - x * math.log(x) - (1.0 - x) * math.log1p(-x)) / math.log(d)
    return min(max(value, 0.0), 1.0)


def log2_of_inverse(eps: float) -> float:
    if not (0.0 < eps <= 1.0):
        raise DomainError(f"eps must be in (0,1], got {eps}")
    return -math.log2(eps)


def probability_from_log(log_p: float) -> float:
    """Linear accessor for a log-probability, clamped to [0,1]."""
    if log_p >= 0.0:
        return 1.0
    return math.exp(log_p)


def shannon_entropy_bits(p: Sequence[float]) -> float:
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    if p.sum() <= 0.0:
        return 0.0
    return float(_shannon(p, base=2))


def hamming_ball_log_volume_exact(n: int, k: int, d: int) -> float:
    """log2 of sum_{w<=k} C(n,w)(d-1)^w, summed with exact integers."""
    d = require_prime(d)
    if n > EXACT_HAMMING_LIMIT:
        raise RangeLimitError(f"exact Hamming-ball counts are capped at n={EXACT_HAMMING_LIMIT}, got n={n}")
    if not (0 <= k <= n):
        raise DomainError(f"need 0 <= k <= n, got k={k}, n={n}")
    total = sum(math.comb(n, w) * (d - 1) ** w for w in range(k + 1))
    return math.log2(total)


def hamming_ball_log_volume_bound(n: int, k: int, d: int) -> float:
    """log2 of d^{n h_d(k/n)}, with k/n capped at (d-1)/d where the ball is the whole space."""
    d = require_prime(d)
    if not (0 <= k <= n):
        raise DomainError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        return 0.0
    x = min(k / n, (d - 1) / d)
    return n * d_ary_entropy(x, d) * math.log2(d)
