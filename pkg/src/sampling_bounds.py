"""Analytic error bounds for the classical sampling strategies and the delta_min solver.

Every probability is returned as a natural logarithm.
"""
import math
from typing import Optional, Tuple

from scipy.special import logsumexp

from src.entropy_core import probability_from_log
from src.errors import PreconditionError
from src.schema_models import ConfidenceParams, ConsistencyReport, SamplingGeometry, SecurityTargets
from src.utils import setup_logger

logger = setup_logger("sampling_bounds")

LN2 = math.log(2.0)
CONSISTENCY_RTOL = 1e-6


def default_beta(d: int) -> float:
    return 1.0 / d ** 2


def basic_sampling_error(delta: float, m: int, N: int) -> float:
    """ln of 2 exp(-delta^2 m N / (N+2)) for the plain random-subset strategy."""
    if not 1 <= m <= N / 2:
        raise PreconditionError(f"basic bound needs 1 <= m <= N/2, got m={m}, N={N}")
    if delta < 0:
        raise PreconditionError(f"delta must be non-negative, got {delta}")
    return LN2 - delta ** 2 * m * N / (N + 2)


def strategy_exponents(geom: SamplingGeometry, params: ConfidenceParams) -> Tuple[float, float, float]:
    """The three exponents of the simple-strategy bound; only the first two depend on delta."""
    d, m, N = geom.d, geom.m, geom.N
    if params.beta >= 1.0 / (d + 1):
        raise PreconditionError(f"beta must be below 1/(d+1) = {1.0 / (d + 1):.6f}, got {params.beta}")
    delta1 = params.delta1
    first = -((params.delta - delta1) ** 2) * m * N / (N + 2)
    second = -(delta1 ** 2) * m ** 2 * (1.0 / (d + 1) - params.beta) / (m + 2)
    third = -2.0 * params.beta ** 2 * m
    return first, second, third


def simple_strategy_error(geom: SamplingGeometry, params: ConfidenceParams) -> float:
    return LN2 + float(logsumexp(strategy_exponents(geom, params)))


def union_error(simple_log_eps: float, d: int) -> float:
    """(d+1)(d-1) simple strategies, one per basis and error symbol."""
    return simple_log_eps + math.log((d + 1) * (d - 1))


def c_gamma(geom: SamplingGeometry, beta: Optional[float] = None) -> float:
    d, m, N = geom.d, geom.m, geom.N
    beta = default_beta(d) if beta is None else beta
    ratio = (m / (m + 2)) * ((N + 2) / N) * (1.0 / (d + 1) - beta)
    return 1.0 / (math.sqrt(max(ratio, 0.0)) + 1.0)


def chi_d(targets: SecurityTargets, d: int) -> float:
    if targets.eps >= targets.eps_sec:
        raise PreconditionError("eps must be below eps_sec")
    return math.log((targets.eps_sec - targets.eps) ** 2 / (96.0 * (d + 1) * (d - 1)))


def delta_candidates(targets: SecurityTargets, geom: SamplingGeometry, c: float,
                     beta: Optional[float] = None) -> Tuple[float, float]:
    """delta making the first (resp. second) exponent equal chi_d."""
    d, m, N = geom.d, geom.m, geom.N
    beta = default_beta(d) if beta is None else beta
    chi = chi_d(targets, d)
    first = math.sqrt(-chi * (N + 2) / ((1.0 - c) ** 2 * N * m))
    second = math.sqrt(-chi * (m + 2) / (c ** 2 * m ** 2 * (1.0 / (d + 1) - beta)))
    return first, second


def delta_min(targets: SecurityTargets, geom: SamplingGeometry, c: Optional[float] = None,
              beta: Optional[float] = None) -> float:
    """Smallest delta for which the dominating delta-dependent term reaches exp(chi_d)."""
    beta = default_beta(geom.d) if beta is None else beta
    if not 0.0 < beta < 1.0 / (geom.d + 1):
        raise PreconditionError(f"beta must lie in (0, 1/(d+1)), got {beta}")
    c = c_gamma(geom, beta) if c is None else c
    if not 0.0 < c < 1.0:
        raise PreconditionError(f"split ratio c must lie in (0,1), got {c}")
    first, second = delta_candidates(targets, geom, c, beta)
    return first if c >= c_gamma(geom, beta) else second


def achieved_security(targets: SecurityTargets, geom: SamplingGeometry, delta: float,
                      c: Optional[float] = None, beta: Optional[float] = None) -> Tuple[float, float, float]:
    """(eps + 4 sqrt((d+1)(d-1) eps^{j,c}), the printed eps + 4 (d+1)(d-1) sqrt(eps^{j,c}), ln eps^{j,c})."""
    d = geom.d
    beta = default_beta(d) if beta is None else beta
    c = c_gamma(geom, beta) if c is None else c
    log_simple = simple_strategy_error(geom, ConfidenceParams(delta=delta, c=c, beta=beta))
    union = (d + 1) * (d - 1)
    tight = targets.eps + 4.0 * math.exp(0.5 * (math.log(union) + log_simple))
    printed = targets.eps + 4.0 * union * math.exp(0.5 * log_simple)
    return tight, printed, log_simple


def verify_consistency(targets: SecurityTargets, geom: SamplingGeometry, c: Optional[float] = None,
                       beta: Optional[float] = None) -> ConsistencyReport:
    d = geom.d
    beta = default_beta(d) if beta is None else beta
    cg = c_gamma(geom, beta)
    c = cg if c is None else c
    delta = delta_min(targets, geom, c, beta)
    first, second, third = strategy_exponents(geom, ConfidenceParams(delta=delta, c=c, beta=beta))
    tight, printed, log_simple = achieved_security(targets, geom, delta, c, beta)
    log_cl = union_error(log_simple, d)

    flags = []
    third_ok = third <= max(first, second)
    hoeffding_ok = beta < 0.5 - 1.0 / (d + 1)
    if not third_ok:
        flags.append("third_term_not_dominated")
        logger.warning(f"exp(-2 beta^2 m) dominates at m={geom.m}, d={d}: target security is not guaranteed")
    if not hoeffding_ok:
        flags.append("beta_violates_hoeffding_condition")
    within = tight <= targets.eps_sec * (1.0 + CONSISTENCY_RTOL)
    if printed > targets.eps_sec * (1.0 + CONSISTENCY_RTOL):
        flags.append("printed_union_form_exceeds_target")

    return ConsistencyReport(
        d=d, N=geom.N, m=geom.m, c=c, c_gamma=cg, beta=beta, chi_d=chi_d(targets, d),
        branch="first" if c >= cg else "second", delta_min=delta,
        log_eps_simple=log_simple, log_eps_cl=log_cl,
        eps_simple=probability_from_log(log_simple), eps_cl=probability_from_log(log_cl),
        achieved_security=tight, printed_form_security=printed, eps_sec=targets.eps_sec,
        within_target=within, slack=targets.eps_sec - tight,
        third_term_dominated=third_ok, hoeffding_condition_ok=hoeffding_ok, flags=flags,
    )
