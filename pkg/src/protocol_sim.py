"""Desk-scale simulation of the entanglement-based protocol over i.i.d. Bell-diagonal channels.

Only the test rounds are measured: each sampled Bell label has exactly one outcome per
basis (outcome_class_table), so no randomness beyond the labels and the (t, s) draw is
needed. Key-round outcomes do not enter the key length and are not generated.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.errors import InfeasibleStatisticsError
from src.keyrate import evaluate
from src.mub_bell import invert_statistics, outcome_class_table
from src.sampling_montecarlo import SubsetDraw, draw_subset_and_bases
from src.schema_models import (ChannelModel, LeakageModel, NoiseThresholds, SecurityTargets, SimulationRun,
                               require_prime)
from src.utils import chunk_sizes, parallel_map, setup_logger, spawn_generators

logger = setup_logger("protocol_sim")

ROUND_BLOCK = 1 << 16
ABORT_TOL = 1e-12


@dataclass(frozen=True)
class RoundSample:
    labels: np.ndarray
    draw: SubsetDraw
    outcomes: np.ndarray


def depolarizing_channel(d: int, Q: float) -> ChannelModel:
    d = require_prime(d)
    if not 0.0 <= Q <= 1.0:
        raise ValueError(f"depolarizing probability must be in [0,1], got {Q}")
    p00 = ((d + 1) * (1.0 - Q) - 1.0) / d
    if p00 < 0:
        raise InfeasibleStatisticsError(f"Q={Q} exceeds d/(d+1) = {d / (d + 1):.4f}; no depolarizing channel")
    p = np.full((d, d), Q / (d * (d - 1)))
    p[0, 0] = p00
    p /= p.sum()
    return ChannelModel(d=d, p=p.tolist())


def channel_from_thresholds(qhat: NoiseThresholds) -> ChannelModel:
    """A Bell-diagonal channel whose per-basis statistics equal the given thresholds."""
    lam = invert_statistics(qhat.full_matrix(), 1.0, qhat.d)
    if (lam < -1e-12).any():
        logger.warning("thresholds are not exactly reachable by a Bell-diagonal channel; clamping")
    lam = np.clip(lam, 0.0, None)
    return ChannelModel(d=qhat.d, p=(lam / lam.sum()).tolist())


def _sample_block(args) -> np.ndarray:
    rng, size, flat_p = args
    return rng.choice(flat_p.size, size=size, p=flat_p)


def sample_round_outcomes(channel: ChannelModel, N: int, m: int, seed: int, threads: int = 1) -> RoundSample:
    """Draws N labels in fixed blocks (one stream each) plus the test subset and bases."""
    d = channel.d
    flat_p = channel.as_array().ravel()
    sizes = chunk_sizes(N, ROUND_BLOCK)
    rngs = spawn_generators(seed, len(sizes) + 1)
    blocks = parallel_map(_sample_block, [(rng, size, flat_p) for rng, size in zip(rngs[1:], sizes)], threads)
    flat = np.concatenate(blocks)
    labels = np.column_stack(np.divmod(flat, d))
    draw = draw_subset_and_bases(N, m, d, rngs[0])
    table = outcome_class_table(d)
    tested = labels[draw.t]
    outcomes = table[draw.s, tested[:, 0], tested[:, 1]]
    return RoundSample(labels=tested, draw=draw, outcomes=outcomes)


def observed_frequencies(outcomes: np.ndarray, bases: np.ndarray, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """(d+1, d) per-basis outcome frequencies and the class sizes m_j."""
    counts = np.zeros((d + 1, d))
    np.add.at(counts, (bases, outcomes), 1)
    m_j = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(m_j[:, None] > 0, counts / m_j[:, None], 0.0)
    return freq, m_j.astype(int)


def abort_check(freq: np.ndarray, m_j: np.ndarray, qhat: NoiseThresholds) -> Tuple[bool, List[str]]:
    """Abort iff some observed w(q_c^j) > Q_hat_c^j (strict); empty classes always abort."""
    reasons = [f"empty_basis_class:j={j}" for j in range(qhat.d + 1) if m_j[j] == 0]
    thresholds = qhat.as_array()
    for j in range(qhat.d + 1):
        if m_j[j] == 0:
            continue
        for c in range(1, qhat.d):
            if freq[j, c] > thresholds[j, c - 1] + ABORT_TOL:
                reasons.append(f"j={j},c={c}")
    return bool(reasons), reasons


def run_protocol(channel: ChannelModel, N: int, m: int, qhat: NoiseThresholds, targets: SecurityTargets,
                 leak_model: LeakageModel, seed: int, threads: int = 1) -> SimulationRun:
    if channel.d != qhat.d:
        raise ValueError(f"channel dimension {channel.d} differs from thresholds dimension {qhat.d}")
    sample = sample_round_outcomes(channel, N, m, seed, threads)
    freq, m_j = observed_frequencies(sample.outcomes, sample.draw.s, channel.d)
    aborted, reasons = abort_check(freq, m_j, qhat)
    result = None
    if not aborted:
        # parameterized by the thresholds, not by what was observed
        result = evaluate(qhat, N, m, targets, leak_model)
    return SimulationRun(seed=seed, N=N, m=m, d=channel.d, observed=freq.tolist(), m_j=m_j.tolist(),
                         aborted=aborted, reasons=reasons, result=result)
