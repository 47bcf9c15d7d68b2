"""Monte Carlo verifier for the classical sampling strategy.

Words are (N, 2) integer arrays of Bell labels (alpha, beta). Subset positions are
0-based. A test class with m_j = 0 counts as a failure.
"""
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import beta as beta_dist

from src.errors import PreconditionError
from src.mub_bell import outcome_class_table
from src.sampling_bounds import c_gamma, default_beta, simple_strategy_error, union_error
from src.schema_models import ConfidenceParams, SamplingGeometry, TrialReport, require_prime
from src.utils import chunk_sizes, parallel_map, setup_logger, spawn_generators

logger = setup_logger("sampling_mc")

WORD_FAMILIES = ("uniform-class", "alternating", "blocked", "random")
TRIAL_CHUNK = 2000
DRAW_BUDGET = 4_000_000
DEFAULT_LEVEL = 0.99
MIN_TRIALS = 1000


@dataclass(frozen=True)
class SubsetDraw:
    t: np.ndarray
    s: np.ndarray


def draw_subset_and_bases(N: int, m: int, d: int, rng: np.random.Generator) -> SubsetDraw:
    """Uniform size-m subset of range(N) (sorted) and i.i.d. uniform basis choices in 0..d."""
    if not 1 <= m <= N:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={N}")
    t = np.sort(rng.choice(N, size=m, replace=False))
    s = rng.integers(0, d + 1, size=m)
    return SubsetDraw(t=t, s=s)


def trial_chunk(N: int) -> int:
    """Trials per chunk; each chunk holds about DRAW_BUDGET random keys. Fixed by N alone."""
    return max(1, min(TRIAL_CHUNK, DRAW_BUDGET // N))


def draw_batch(N: int, m: int, d: int, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """size independent draws at once: (size, m) positions and (size, m) bases."""
    keys = rng.random((size, N))
    t = np.argpartition(keys, m - 1, axis=1)[:, :m] if m < N else np.tile(np.arange(N), (size, 1))
    s = rng.integers(0, d + 1, size=(size, m))
    return t, s


def word_classes(q: np.ndarray, d: int) -> np.ndarray:
    """(d+1, N) outcome symbol of every position in every basis."""
    q = np.asarray(q)
    return outcome_class_table(d)[:, q[:, 0], q[:, 1]]


def make_word(family: str, N: int, d: int, seed: int = 0) -> np.ndarray:
    d = require_prime(d)
    q = np.zeros((N, 2), dtype=np.int64)
    if family == "uniform-class":
        q[:, 0] = 1
    elif family == "alternating":
        q[1::2, 0] = 1
    elif family == "blocked":
        q[N // 2:] = (1, 1)
    elif family == "random":
        rng = np.random.default_rng(seed)
        weights = np.full(d * d, 0.3 / (d * d - 1))
        weights[0] = 0.7
        labels = rng.choice(d * d, size=N, p=weights)
        q[:, 0], q[:, 1] = np.divmod(labels, d)
    else:
        raise ValueError(f"unknown word family '{family}', expected one of {WORD_FAMILIES}")
    return q


def _deviation(classes_j: np.ndarray, draw: SubsetDraw, j: int, c: int, N: int) -> Optional[float]:
    in_test = np.zeros(N, dtype=bool)
    in_test[draw.t] = True
    tested = draw.t[draw.s == j]
    if tested.size == 0:
        return None
    key = classes_j[~in_test]
    test_fraction = np.mean(classes_j[tested] == c)
    key_fraction = np.mean(key == c) if key.size else 0.0
    return abs(test_fraction - key_fraction)


def good_word_simple(q: np.ndarray, draw: SubsetDraw, j: int, c: int, delta: float, d: int) -> bool:
    classes = word_classes(q, d)
    dev = _deviation(classes[j], draw, j, c, len(q))
    return dev is not None and dev <= delta


def good_word_full(q: np.ndarray, draw: SubsetDraw, delta: float, d: int) -> bool:
    classes = word_classes(q, d)
    for j in range(d + 1):
        for c in range(1, d):
            dev = _deviation(classes[j], draw, j, c, len(q))
            if dev is None or dev > delta:
                return False
    return True


def clopper_pearson_upper(failures: int, trials: int, level: float = DEFAULT_LEVEL) -> float:
    """One-sided exact binomial upper confidence limit."""
    if failures >= trials:
        return 1.0
    return float(beta_dist.ppf(level, failures + 1, trials - failures))


def batch_deviations(classes: np.ndarray, pairs: Sequence[Tuple[int, int]], t: np.ndarray,
                     s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Deviation per draw (row of t, s) for each (j,c) pair; inf marks an empty test class."""
    size, m = t.shape
    n = classes.shape[1] - m
    devs = np.empty((size, len(pairs)))
    empty = np.zeros((size, len(pairs)), dtype=bool)
    for col, (j, c) in enumerate(pairs):
        hit = classes[j][t] == c
        in_basis = s == j
        m_j = in_basis.sum(axis=1)
        test_hits = (hit & in_basis).sum(axis=1)
        key_hits = (classes[j] == c).sum() - hit.sum(axis=1)
        key_fraction = key_hits / n if n else np.zeros(size)
        with np.errstate(invalid="ignore", divide="ignore"):
            dev = np.abs(test_hits / m_j - key_fraction)
        empty[:, col] = m_j == 0
        devs[:, col] = np.where(m_j == 0, np.inf, dev)
    return devs, empty


def _chunk_deviations(args) -> Tuple[np.ndarray, np.ndarray]:
    classes, pairs, m, d, rng, size = args
    t, s = draw_batch(classes.shape[1], m, d, rng, size)
    return batch_deviations(classes, pairs, t, s)


def estimate_failure_grid(q: np.ndarray, m: int, d: int, deltas: Sequence[float],
                          pairs: Optional[Iterable[Tuple[int, int]]], trials: int, seed: int,
                          level: float = DEFAULT_LEVEL, threads: int = 1,
                          c_split: Optional[float] = None, beta: Optional[float] = None) -> List[TrialReport]:
    """One set of draws shared by every delta and (j,c) pair.

    pairs=None evaluates the full strategy (all j, c >= 1 at once) and compares with the
    union bound. Draws are made in chunks of trial_chunk(N) with one derived stream per
    chunk, so the counts do not depend on the number of threads.
    """
    d = require_prime(d)
    q = np.asarray(q)
    N = len(q)
    if trials < MIN_TRIALS:
        raise PreconditionError(f"need at least {MIN_TRIALS} trials, got {trials}")
    full = pairs is None
    pair_list = [(j, c) for j in range(d + 1) for c in range(1, d)] if full else list(pairs)
    classes = word_classes(q, d)
    sizes = chunk_sizes(trials, trial_chunk(N))
    rngs = spawn_generators(seed, len(sizes))
    chunks = parallel_map(_chunk_deviations,
                          [(classes, pair_list, m, d, rng, size) for rng, size in zip(rngs, sizes)],
                          threads)
    devs = np.concatenate([c[0] for c in chunks])
    empty = np.concatenate([c[1] for c in chunks])

    geom = SamplingGeometry(N=N, m=m, d=d) if m < N else None
    beta = default_beta(d) if beta is None else beta
    split = (c_gamma(geom, beta) if geom else 0.5) if c_split is None else c_split

    reports = []
    targets = [(None, None)] if full else pair_list
    for delta in deltas:
        if full:
            fail_cols = [(devs > delta).any(axis=1)]
            empty_cols = [empty.any(axis=1)]
        else:
            fail_cols = [devs[:, col] > delta for col in range(len(pair_list))]
            empty_cols = [empty[:, col] for col in range(len(pair_list))]
        for (j, c), failed, was_empty in zip(targets, fail_cols, empty_cols):
            failures = int(failed.sum())
            upper = clopper_pearson_upper(failures, trials, level)
            bound = None
            dominated = None
            if geom is not None and delta > 0:
                bound = simple_strategy_error(geom, ConfidenceParams(delta=delta, c=split, beta=beta))
                if full:
                    bound = union_error(bound, d)
                if bound < 0.0:
                    dominated = bool(upper <= np.exp(bound))
            reports.append(TrialReport(
                j=j, c=c, delta=delta, trials=trials, failures=failures,
                empty_class_failures=int(was_empty.sum()), point_estimate=failures / trials,
                upper_limit=max(upper, failures / trials), level=level,
                analytic_bound_log=bound, dominated=dominated,
            ))
    undominated = [r for r in reports if r.dominated is False]
    if undominated:
        logger.warning(f"{len(undominated)} Monte Carlo estimates exceed the analytic bound")
    return reports


def estimate_failure(q: np.ndarray, m: int, d: int, delta: float, j: Optional[int], c: Optional[int],
                     trials: int, seed: int, level: float = DEFAULT_LEVEL, threads: int = 1) -> TrialReport:
    """Failure frequency of one simple strategy (or the full one when j is None)."""
    pairs = None if j is None else [(j, c)]
    return estimate_failure_grid(q, m, d, [delta], pairs, trials, seed, level, threads)[0]
