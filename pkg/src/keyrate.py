"""Finite-key length and rate for the (d+1)-MUB high-dimensional BB84 protocol.

Pipeline for one scenario: delta_min -> worst-case statistics Q_hat + delta -> Bell
weights lambda -> min-entropy bound gamma -> ell = gamma - leak_EC - 2 log2(1/eps).
"""
import math
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import brentq

from src.entropy_core import d_ary_entropy, log2_of_inverse, shannon_entropy_bits
from src.errors import InfeasibleStatisticsError, PreconditionError
from src.mub_bell import invert_statistics
from src.sampling_bounds import (achieved_security, c_gamma, default_beta, delta_min, strategy_exponents,
                                 union_error)
from src.schema_models import (BellWeights, ConfidenceParams, KeyRateResult, LeakageModel, NoiseThresholds,
                               SamplingGeometry, SecurityTargets)
from src.utils import parallel_map, setup_logger

logger = setup_logger("keyrate")

NEGATIVITY_THRESHOLD = 0.05
REFINE_POINTS = 32
REFINE_PASSES = 2
CAP_TOLERANCE = 1e-12


def worst_case_statistics(qhat: NoiseThresholds, delta: float) -> Tuple[np.ndarray, List[str]]:
    """Q_c^j = min(Q_hat_c^j + delta, 1) for c >= 1, Q_0^j completes each row to 1."""
    if delta < 0:
        raise PreconditionError(f"delta must be non-negative, got {delta}")
    flags = []
    errors = np.minimum(qhat.as_array() + delta, 1.0)
    row_sums = errors.sum(axis=1)
    over = row_sums > 1.0
    if over.any():
        flags.append("error_rows_saturated:" + ",".join(str(j) for j in np.flatnonzero(over)))
        errors[over] = errors[over] / row_sums[over, None]
        row_sums = errors.sum(axis=1)
    Q = np.column_stack([np.clip(1.0 - row_sums, 0.0, 1.0), errors])
    return Q, flags


def bell_weights_from_statistics(Q: np.ndarray, n: float, d: int,
                                 negativity_threshold: float = NEGATIVITY_THRESHOLD) -> BellWeights:
    """Inverts Q into lambda; negative weights are clamped to 0 and the total rescaled to n."""
    lam = invert_statistics(Q, n, d)
    flags = []
    negativity = float(-lam[lam < 0].sum())
    if negativity > negativity_threshold * n:
        raise InfeasibleStatisticsError(
            f"statistics imply negative Bell weight {negativity:.4g} > {negativity_threshold} n "
            f"(n={n}); no Bell-diagonal state matches them", negativity=negativity)
    if negativity > 1e-12 * n:
        flags.append(f"negative_lambda_clamped:{negativity / n:.3g}")
        lam = np.clip(lam, 0.0, None)
        lam *= n / lam.sum()
    return BellWeights(d=d, values=lam.tolist(), flags=flags)


def min_entropy_bound(lam: Union[BellWeights, np.ndarray], d: int) -> Tuple[float, List[str]]:
    """gamma = n log2 d - log2 d * sum_alpha n_alpha h_d(phase errors in row alpha / n_alpha)."""
    lam = lam.as_array() if isinstance(lam, BellWeights) else np.asarray(lam, dtype=float)
    n = float(lam.sum())
    cap = (d - 1) / d
    flags = []
    penalty = 0.0
    for alpha in range(d):
        n_alpha = float(lam[alpha].sum())
        if n_alpha <= 0.0:
            continue
        x = float(lam[alpha, 1:].sum()) / n_alpha
        if x > cap + CAP_TOLERANCE:
            flags.append(f"phase_error_capped:alpha={alpha}")
        x = min(x, cap)
        penalty += n_alpha * d_ary_entropy(min(max(x, 0.0), 1.0), d)
    log2d = math.log2(d)
    return n * log2d - log2d * penalty, flags


def leak_ec(model: LeakageModel, n: float, qhat: NoiseThresholds) -> float:
    """Error-correction leakage in bits; shannon mode uses the basis-0 error distribution."""
    if model.mode == "fixed":
        return model.bits
    p = qhat.full_matrix()[0]
    return model.efficiency * n * shannon_entropy_bits(p) + log2_of_inverse(model.eps_cor)


def key_length(gamma: float, leak: float, eps: float) -> int:
    return max(0, math.floor(gamma - leak - 2.0 * log2_of_inverse(eps)))


def evaluate(qhat: NoiseThresholds, N: int, m: int, targets: SecurityTargets, leak_model: LeakageModel,
             c: Optional[float] = None, beta: Optional[float] = None, delta: Optional[float] = None,
             negativity_threshold: float = NEGATIVITY_THRESHOLD) -> KeyRateResult:
    """Key length at a fixed sample size m; delta defaults to delta_min."""
    d = qhat.d
    if not 1 <= m < N:
        raise PreconditionError(f"need 1 <= m < N, got m={m}, N={N}")
    geom = SamplingGeometry(N=N, m=m, d=d)
    beta = default_beta(d) if beta is None else beta
    c = c_gamma(geom, beta) if c is None else c
    flags = []
    if delta is None:
        delta = delta_min(targets, geom, c, beta)
        first, second, third = strategy_exponents(geom, ConfidenceParams(delta=delta, c=c, beta=beta))
        if third > max(first, second):
            flags.append("third_term_not_dominated")
    security, _, log_simple = achieved_security(targets, geom, delta, c, beta) if delta > 0 else (1.0, 1.0, 0.0)
    if beta >= 0.5 - 1.0 / (d + 1):
        flags.append("beta_violates_hoeffding_condition")

    Q, q_flags = worst_case_statistics(qhat, delta)
    flags += q_flags
    weights = bell_weights_from_statistics(Q, geom.n, d, negativity_threshold)
    flags += weights.flags
    gamma, g_flags = min_entropy_bound(weights, d)
    flags += g_flags
    leak = leak_ec(leak_model, geom.n, qhat)
    ell = key_length(gamma, leak, targets.eps)
    return KeyRateResult(
        d=d, N=N, m=m, n=geom.n, ell=ell, rate=ell / N, delta_used=delta, c=c, beta=beta,
        gamma=gamma, leak=leak, lambda_weights=weights.values, achieved_security=security,
        log_eps_cl=union_error(log_simple, d), flags=flags,
    )


def _safe_evaluate(args) -> Optional[KeyRateResult]:
    qhat, N, m, targets, leak_model, c, beta, negativity_threshold = args
    try:
        return evaluate(qhat, N, m, targets, leak_model, c=c, beta=beta, negativity_threshold=negativity_threshold)
    except InfeasibleStatisticsError:
        return None


def _geometric_grid(N: int) -> List[int]:
    grid = set()
    k = 1
    while True:
        m = math.ceil(N / 2 ** k)
        grid.add(min(m, N - 1))
        if m == 1:
            return sorted(grid)
        k += 1


def _refine(lo: int, hi: int) -> List[int]:
    return sorted({int(round(v)) for v in np.linspace(lo, hi, REFINE_POINTS)})


def _best(results: List[Tuple[int, Optional[KeyRateResult]]]) -> Tuple[int, Optional[KeyRateResult]]:
    """Max by rate, ties broken by smaller m; infeasible points count as rate 0."""
    return max(results, key=lambda mr: (mr[1].rate if mr[1] else 0.0, -mr[0]))


def optimize_m(qhat: NoiseThresholds, N: int, targets: SecurityTargets, leak_model: LeakageModel,
               c: Optional[float] = None, beta: Optional[float] = None, threads: int = 1,
               negativity_threshold: float = NEGATIVITY_THRESHOLD) -> KeyRateResult:
    """Geometric coarse grid over m followed by two linear refinements around the best point."""
    if N < 4:
        raise PreconditionError(f"optimize_m needs N >= 4, got {N}")
    evaluated = {}

    def run(ms: List[int]):
        todo = [m for m in ms if m not in evaluated]
        results = parallel_map(_safe_evaluate, [(qhat, N, m, targets, leak_model, c, beta, negativity_threshold) for m in todo], threads)
        evaluated.update(zip(todo, results))

    grid = _geometric_grid(N)
    run(grid)
    best_m, _ = _best([(m, evaluated[m]) for m in grid])
    for _ in range(REFINE_PASSES):
        ordered = sorted(evaluated)
        idx = ordered.index(best_m)
        lo = ordered[idx - 1] if idx > 0 else 1
        hi = ordered[idx + 1] if idx + 1 < len(ordered) else N - 1
        run(_refine(lo, hi))
        best_m, _ = _best(sorted(evaluated.items()))

    best_m, best = _best(sorted(evaluated.items()))
    if best is None:
        best = _zero_result(qhat, N, best_m, targets, c, beta)
    best = best.model_copy(update={"m_opt": best_m})
    logger.info(f"optimize_m: d={qhat.d} N={N} -> m_opt={best_m}, rate={best.rate:.6g}")
    return best


def _zero_result(qhat: NoiseThresholds, N: int, m: int, targets: SecurityTargets,
                 c: Optional[float], beta: Optional[float]) -> KeyRateResult:
    """Every candidate m was infeasible: report ell = 0 with the sampling terms still filled in."""
    geom = SamplingGeometry(N=N, m=m, d=qhat.d)
    beta = default_beta(qhat.d) if beta is None else beta
    c = c_gamma(geom, beta) if c is None else c
    delta = delta_min(targets, geom, c, beta)
    security, _, log_simple = achieved_security(targets, geom, delta, c, beta)
    return KeyRateResult(
        d=qhat.d, N=N, m=m, n=geom.n, ell=0, rate=0.0, delta_used=delta, c=c, beta=beta,
        gamma=0.0, leak=0.0, lambda_weights=[], achieved_security=security,
        log_eps_cl=union_error(log_simple, qhat.d), flags=["infeasible_statistics"],
    )


def asymptotic_rate(qhat: NoiseThresholds, leak_model: LeakageModel) -> float:
    """Rate per key round with no finite-size terms: delta = 0 and the hash term dropped."""
    d = qhat.d
    weights = bell_weights_from_statistics(qhat.full_matrix(), 1.0, d)
    gamma, _ = min_entropy_bound(weights, d)
    if leak_model.mode == "fixed":
        return gamma
    return gamma - leak_model.efficiency * shannon_entropy_bits(qhat.full_matrix()[0])


def noise_tolerance(d: int, leak_model: LeakageModel) -> float:
    """Symmetric noise level Q at which asymptotic_rate crosses zero."""
    def rate(Q: float) -> float:
        return asymptotic_rate(NoiseThresholds.symmetric(d, Q), leak_model)

    return brentq(rate, 0.0, (d - 1) / d, xtol=1e-10)
