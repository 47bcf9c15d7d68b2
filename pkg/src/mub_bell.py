"""Brute-force linear-algebra oracle for the d+1 MUBs, the HD Bell basis and the POVMs.

Basis 0 is the eigenbasis of Z, basis j = k+1 the eigenbasis of X Z^k. Eigenvectors
are labelled by their eigenvalue zeta_k * omega^x. In Lambda^j_c Alice's projector is
the complex conjugate of the basis-j projector, the frame in which |phi_0^0> gives
identical outcomes in every basis.
"""
import itertools
from functools import lru_cache
from typing import FrozenSet, List, Tuple

import numpy as np

from src.errors import DimensionError, InfeasibleStatisticsError, NumericalError
from src.schema_models import require_prime
from src.utils import setup_logger

logger = setup_logger("mub_bell")

MAX_ORACLE_DIMENSION = 13
EIG_RESIDUAL_TOL = 1e-8

BellLabel = Tuple[int, int]


def _oracle_dimension(d: int) -> int:
    d = require_prime(d)
    if d > MAX_ORACLE_DIMENSION:
        raise DimensionError(f"linear-algebra oracle is limited to d <= {MAX_ORACLE_DIMENSION}, got {d}")
    return d


def shift_operator(d: int) -> np.ndarray:
    """X = sum_j |j><j-1|."""
    return np.roll(np.eye(d, dtype=complex), 1, axis=0)


def clock_operator(d: int) -> np.ndarray:
    """Z = sum_j omega^j |j><j|."""
    return np.diag(np.exp(2j * np.pi * np.arange(d) / d))


def _canonical_phase(vec: np.ndarray) -> np.ndarray:
    lead = vec[np.flatnonzero(np.abs(vec) > 1e-12)[0]]
    return vec * (abs(lead) / lead)


def _eigenbasis(op: np.ndarray, k: int, d: int) -> np.ndarray:
    vals, vecs = np.linalg.eig(op)
    residual = np.max(np.abs(op @ vecs - vecs * vals))
    if residual > EIG_RESIDUAL_TOL:
        raise NumericalError(f"eigendecomposition residual {residual:.3e} for XZ^{k}, d={d}")
    zeta = np.exp(1j * np.pi * k * (d - 1) / d)
    labels = np.mod(np.rint(np.angle(vals / zeta) * d / (2 * np.pi)).astype(int), d)
    if sorted(labels) != list(range(d)):
        raise NumericalError(f"eigenvalues of XZ^{k} do not label a full cycle for d={d}: {labels}")
    basis = np.empty((d, d), dtype=complex)
    for col, x in enumerate(labels):
        v = vecs[:, col] / np.linalg.norm(vecs[:, col])
        basis[:, x] = _canonical_phase(v)
    gram = basis.conj().T @ basis
    if np.max(np.abs(gram - np.eye(d))) > EIG_RESIDUAL_TOL:
        raise NumericalError(f"eigenbasis of XZ^{k} is not orthonormal for d={d}")
    return basis


@lru_cache(maxsize=None)
def build_mub_bases(d: int) -> Tuple[np.ndarray, ...]:
    """d+1 bases as (d, d) arrays whose column x is the vector |x>^j; arrays are read-only."""
    d = _oracle_dimension(d)
    X, Z = shift_operator(d), clock_operator(d)
    bases = [np.eye(d, dtype=complex)]
    for k in range(d):
        bases.append(_eigenbasis(X @ np.linalg.matrix_power(Z, k), k, d))
    for b in bases:
        b.flags.writeable = False
    logger.info(f"Built {d + 1} mutually unbiased bases for d={d}")
    return tuple(bases)


def bell_state(d: int, alpha: int, beta: int) -> np.ndarray:
    """|phi_alpha^beta> = d^{-1/2} sum_a omega^{a beta} |a, a+alpha>, index a*d + b."""
    d = require_prime(d)
    if not (0 <= alpha < d and 0 <= beta < d):
        raise ValueError(f"Bell label ({alpha},{beta}) outside A_{d} x A_{d}")
    vec = np.zeros(d * d, dtype=complex)
    a = np.arange(d)
    vec[a * d + (a + alpha) % d] = np.exp(2j * np.pi * a * beta / d) / np.sqrt(d)
    return vec


def povm_element(d: int, j: int, c: int) -> np.ndarray:
    d = _oracle_dimension(d)
    if not (0 <= j <= d and 0 <= c < d):
        raise IndexError(f"POVM index (j={j}, c={c}) invalid for d={d}")
    basis = build_mub_bases(d)[j]
    element = np.zeros((d * d, d * d), dtype=complex)
    for x in range(d):
        u = basis[:, x].conj()
        v = basis[:, (x + c) % d]
        element += np.kron(np.outer(u, u.conj()), np.outer(v, v.conj()))
    return element


def outcome_probability(d: int, j: int, c: int, alpha: int, beta: int) -> float:
    phi = bell_state(d, alpha, beta)
    return float(np.real(phi.conj() @ povm_element(d, j, c) @ phi))


def pcj_closed_form(d: int, j: int, c: int) -> FrozenSet[BellLabel]:
    """P_c^j: {alpha = c} for j = 0, {s*alpha - beta = c mod d} for j = s+1."""
    d = require_prime(d)
    if not (0 <= j <= d and 0 <= c < d):
        raise IndexError(f"index (j={j}, c={c}) invalid for d={d}")
    labels = itertools.product(range(d), repeat=2)
    if j == 0:
        return frozenset((a, b) for a, b in labels if a == c)
    s = j - 1
    return frozenset((a, b) for a, b in labels if (s * a - b) % d == c)


@lru_cache(maxsize=None)
def outcome_class_table(d: int) -> np.ndarray:
    """table[j, alpha, beta] = the outcome c whose set P_c^j contains (alpha, beta)."""
    d = require_prime(d)
    alpha, beta = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    table = np.empty((d + 1, d, d), dtype=np.int64)
    table[0] = alpha
    for s in range(d):
        table[s + 1] = (s * alpha - beta) % d
    table.flags.writeable = False
    return table


def oracle_outcome_sets(d: int) -> List[dict]:
    """Per (j, c): the oracle set, the closed-form set and the worst deviation from a 0/1 probability."""
    d = _oracle_dimension(d)
    states = [bell_state(d, a, b) for a, b in itertools.product(range(d), repeat=2)]
    rows = []
    for j in range(d + 1):
        elements = [povm_element(d, j, c) for c in range(d)]
        completeness = float(np.max(np.abs(sum(elements) - np.eye(d * d))))
        for c, element in enumerate(elements):
            oracle = set()
            determinism = 0.0
            for idx, phi in enumerate(states):
                p = float(np.real(phi.conj() @ element @ phi))
                determinism = max(determinism, min(abs(p), abs(1.0 - p)))
                if p > 0.5:
                    oracle.add(divmod(idx, d))
            rows.append({
                "j": j, "c": c, "oracle": frozenset(oracle), "closed_form": pcj_closed_form(d, j, c),
                "determinism_residual": determinism, "completeness_residual": completeness,
            })
    return rows


def certify_outcome_sets(d: int) -> dict:
    """Oracle residuals for one dimension; all must be ~0 for the closed form to be trusted."""
    d = _oracle_dimension(d)
    bases = build_mub_bases(d)
    overlap_dev = 0.0
    for a, b in itertools.combinations(range(d + 1), 2):
        overlaps = np.abs(bases[a].conj().T @ bases[b]) ** 2
        overlap_dev = max(overlap_dev, float(np.max(np.abs(overlaps - 1.0 / d))))

    rows = oracle_outcome_sets(d)
    mismatches: List[Tuple[int, int]] = [(r["j"], r["c"]) for r in rows if r["oracle"] != r["closed_form"]]
    if mismatches:
        logger.warning(f"Closed-form outcome sets disagree with the oracle for d={d}: {mismatches}")
    return {
        "d": d,
        "max_overlap_deviation": overlap_dev,
        "max_completeness_residual": max(r["completeness_residual"] for r in rows),
        "max_determinism_residual": max(r["determinism_residual"] for r in rows),
        "mismatches": mismatches,
    }


def _check_weights(lam: np.ndarray, d: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (d, d):
        raise InfeasibleStatisticsError(f"Bell weights must be {d}x{d}, got {lam.shape}")
    if (lam < -1e-12 * max(1.0, abs(lam.sum()))).any() or lam.sum() <= 0:
        raise InfeasibleStatisticsError("Bell weights must be non-negative with a positive total")
    return lam


def forward_statistics(lam: np.ndarray, d: int) -> np.ndarray:
    """Q_c^j = (1/n) sum_{(alpha,beta) in P_c^j} lambda_alpha^beta, shape (d+1, d)."""
    d = require_prime(d)
    lam = _check_weights(lam, d)
    table = outcome_class_table(d)
    flat = lam.ravel()
    Q = np.stack([np.bincount(table[j].ravel(), weights=flat, minlength=d) for j in range(d + 1)])
    return Q / flat.sum()


def invert_statistics(Q: np.ndarray, n: float, d: int) -> np.ndarray:
    """lambda_alpha^beta = (n/d)(Q_alpha^0 + sum_s Q^{s+1}_{s alpha - beta mod d} - 1); negatives kept."""
    d = require_prime(d)
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (d + 1, d):
        raise ValueError(f"Q must be {(d + 1, d)}, got {Q.shape}")
    alpha, beta = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    total = Q[0][alpha] - 1.0
    for s in range(d):
        total = total + Q[s + 1][(s * alpha - beta) % d]
    return (n / d) * total
