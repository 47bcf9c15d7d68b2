import math
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, computed_field, model_validator

from src.errors import DimensionError

FEASIBILITY_TOL = 1e-12


def is_prime(d: int) -> bool:
    if d < 2:
        return False
    if d < 4:
        return True
    if d % 2 == 0:
        return False
    return all(d % f for f in range(3, math.isqrt(d) + 1, 2))


def require_prime(d: int) -> int:
    """PrimeDimension constructor: rejects composites and d < 2."""
    if isinstance(d, bool) or int(d) != d or not is_prime(int(d)):
        raise DimensionError(f"d must be a prime >= 2, got {d}")
    return int(d)


PrimeDimension = Annotated[int, AfterValidator(require_prime)]
Fraction01 = Annotated[float, Field(ge=0.0, le=1.0)]


class SecurityTargets(BaseModel):
    eps: float = 1e-14
    eps_sec: float = 1e-12

    @model_validator(mode="after")
    def _ordered(self):
        if not (0.0 < self.eps < self.eps_sec < 1.0):
            raise ValueError(f"need 0 < eps < eps_sec < 1, got eps={self.eps}, eps_sec={self.eps_sec}")
        return self


class SamplingGeometry(BaseModel):
    N: int = Field(ge=2)
    m: int = Field(ge=1)
    d: PrimeDimension

    @model_validator(mode="after")
    def _test_rounds(self):
        if self.m >= self.N:
            raise ValueError(f"need 1 <= m < N, got m={self.m}, N={self.N}")
        return self

    @computed_field
    @property
    def n(self) -> int:
        return self.N - self.m


class ConfidenceParams(BaseModel):
    delta: float = Field(ge=0.0)
    c: float = Field(gt=0.0, lt=1.0)
    beta: float = Field(gt=0.0)

    @property
    def delta1(self) -> float:
        return self.c * self.delta


class NoiseThresholds(BaseModel):
    """Tolerated error fractions; row j is basis j, column c-1 is symbol c >= 1."""
    d: PrimeDimension
    qhat: List[List[Fraction01]]

    @model_validator(mode="after")
    def _shape_and_rows(self):
        if len(self.qhat) != self.d + 1:
            raise ValueError(f"qhat needs {self.d + 1} rows (bases 0..d), got {len(self.qhat)}")
        for j, row in enumerate(self.qhat):
            if len(row) != self.d - 1:
                raise ValueError(f"qhat row {j} needs {self.d - 1} values (symbols 1..d-1), got {len(row)}")
            if sum(row) > 1.0 + FEASIBILITY_TOL:
                raise ValueError(f"qhat row {j} sums to {sum(row)} > 1")
        return self

    @classmethod
    def symmetric(cls, d: int, Q: float) -> "NoiseThresholds":
        d = require_prime(d)
        return cls(d=d, qhat=[[Q / (d - 1)] * (d - 1) for _ in range(d + 1)])

    @classmethod
    def asymmetric(cls, d: int, basis: int, Q_basis: float, Q_other: float) -> "NoiseThresholds":
        d = require_prime(d)
        if not 0 <= basis <= d:
            raise ValueError(f"basis must be in 0..{d}, got {basis}")
        rows = [[(Q_basis if j == basis else Q_other) / (d - 1)] * (d - 1) for j in range(d + 1)]
        return cls(d=d, qhat=rows)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.qhat, dtype=float).reshape(self.d + 1, self.d - 1)

    def full_matrix(self) -> np.ndarray:
        """(d+1) x d matrix with the no-error column Q_0^j = 1 - sum_c Q_c^j completed."""
        errors = self.as_array()
        return np.column_stack([np.clip(1.0 - errors.sum(axis=1), 0.0, 1.0), errors])


class BellWeights(BaseModel):
    d: PrimeDimension
    values: List[List[float]]
    flags: List[str] = []

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def n(self) -> float:
        return float(np.sum(self.values))


class LeakageModel(BaseModel):
    mode: Literal["shannon", "fixed"] = "shannon"
    efficiency: float = Field(default=1.0, ge=1.0)
    bits: float = Field(default=0.0, ge=0.0)
    eps_cor: float = Field(default=1e-15, gt=0.0, le=1.0)

    @classmethod
    def parse(cls, spec: str, eps_cor: Optional[float] = None) -> "LeakageModel":
        """Parses 'shannon', 'shannon:<f>' or 'fixed:<bits>'."""
        mode, _, arg = spec.partition(":")
        extra = {} if eps_cor is None else {"eps_cor": eps_cor}
        if mode == "shannon":
            return cls(mode="shannon", efficiency=float(arg) if arg else 1.0, **extra)
        if mode == "fixed":
            if not arg:
                raise ValueError("fixed leakage needs a bit count, e.g. fixed:1000")
            return cls(mode="fixed", bits=float(arg), **extra)
        raise ValueError(f"unknown leakage mode '{mode}' (use shannon[:f] or fixed:<bits>)")


class KeyRateResult(BaseModel):
    d: int
    N: int
    m: int
    n: int
    ell: int = Field(ge=0)
    rate: float = Field(ge=0.0)
    delta_used: float
    c: float
    beta: float
    gamma: float
    leak: float
    lambda_weights: List[List[float]]
    achieved_security: float
    log_eps_cl: float
    m_opt: Optional[int] = None
    flags: List[str] = []


class ConsistencyReport(BaseModel):
    d: int
    N: int
    m: int
    c: float
    c_gamma: float
    beta: float
    chi_d: float
    branch: Literal["first", "second"]
    delta_min: float
    log_eps_simple: float
    log_eps_cl: float
    eps_simple: float
    eps_cl: float
    achieved_security: float
    printed_form_security: float
    eps_sec: float
    within_target: bool
    slack: float
    third_term_dominated: bool
    hoeffding_condition_ok: bool
    flags: List[str] = []


class TrialReport(BaseModel):
    j: Optional[int] = None
    c: Optional[int] = None
    delta: float
    trials: int = Field(ge=1)
    failures: int = Field(ge=0)
    empty_class_failures: int = Field(default=0, ge=0)
    point_estimate: float
    upper_limit: float
    level: float
    analytic_bound_log: Optional[float] = None
    dominated: Optional[bool] = None

    @model_validator(mode="after")
    def _counts(self):
        if self.failures > self.trials:
            raise ValueError("failures cannot exceed trials")
        if self.upper_limit < self.point_estimate:
            raise ValueError("upper limit below point estimate")
        return self


class ChannelModel(BaseModel):
    """I.i.d. Bell-diagonal channel; p[alpha][beta] is the probability of label (alpha, beta)."""
    d: PrimeDimension
    p: List[List[float]]

    @model_validator(mode="after")
    def _distribution(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (self.d, self.d):
            raise ValueError(f"p must be {self.d}x{self.d}, got {p.shape}")
        if (p < 0).any():
            raise ValueError("channel probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"channel probabilities sum to {p.sum()}, expected 1")
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.p, dtype=float)


class SimulationRun(BaseModel):
    seed: int
    N: int
    m: int
    d: int
    observed: List[List[float]]
    m_j: List[int]
    aborted: bool
    reasons: List[str] = []
    result: Optional[KeyRateResult] = None


class NoiseSpec(BaseModel):
    kind: Literal["symmetric", "matrix", "asymmetric"]
    Q: Optional[Fraction01] = None
    qhat: Optional[List[List[Fraction01]]] = None
    basis: Optional[int] = None
    fixed_Q: Optional[Fraction01] = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        if self.kind == "matrix" and self.qhat is None:
            raise ValueError("matrix noise needs 'qhat'")
        if self.kind == "asymmetric" and (self.basis is None or self.fixed_Q is None):
            raise ValueError("asymmetric noise needs 'basis' and 'fixed_Q'")
        return self


class SweepSpec(BaseModel):
    axis: Literal["N", "Q"]
    values: Optional[List[float]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    num: Optional[int] = Field(default=None, ge=1)
    scale: Literal["log", "linear"] = "linear"

    @model_validator(mode="after")
    def _grid(self):
        has_values = self.values is not None
        has_range = None not in (self.start, self.stop, self.num)
        if has_values == has_range:
            raise ValueError("give either 'values' or 'start'/'stop'/'num' for the sweep axis")
        if self.scale == "log" and has_range and min(self.start, self.stop) <= 0:
            raise ValueError("log-scaled sweeps need positive start/stop")
        return self

    def points(self) -> List[float]:
        if self.values is not None:
            pts = sorted(float(v) for v in self.values)
        elif self.scale == "log":
            pts = list(np.logspace(math.log10(self.start), math.log10(self.stop), self.num))
        else:
            pts = list(np.linspace(self.start, self.stop, self.num))
        if self.axis == "N":
            pts = sorted({int(round(v)) for v in pts})
        return [p if self.axis == "N" else float(p) for p in pts]


class MPolicy(BaseModel):
    mode: Literal["optimize", "fixed"] = "optimize"
    m: Optional[int] = Field(default=None, ge=1)
    fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _fixed_needs_size(self):
        if self.mode == "fixed" and (self.m is None) == (self.fraction is None):
            raise ValueError("fixed m policy needs exactly one of 'm' or 'fraction'")
        return self

    def m_for(self, N: int) -> int:
        if self.m is not None:
            return self.m
        return max(1, int(round(self.fraction * N)))


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: PrimeDimension
    eps: float = 1e-14
    eps_sec: float = 1e-12
    noise: NoiseSpec
    leak: LeakageModel = LeakageModel()
    sweep: SweepSpec
    m_policy: MPolicy = MPolicy()
    N: Optional[int] = Field(default=None, ge=4)
    seed: int = 0
    c: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    beta: Optional[float] = Field(default=None, gt=0.0)
    negativity_threshold: float = Field(default=0.05, ge=0.0)

    @model_validator(mode="after")
    def _consistent(self):
        SecurityTargets(eps=self.eps, eps_sec=self.eps_sec)
        if self.sweep.axis == "Q":
            if self.noise.kind == "matrix":
                raise ValueError("a Q sweep needs symmetric or asymmetric noise, not a fixed matrix")
            if self.N is None:
                raise ValueError("a Q sweep needs a fixed 'N'")
        elif self.noise.kind == "symmetric" and self.noise.Q is None:
            raise ValueError("an N sweep with symmetric noise needs 'noise.Q'")
        elif self.noise.kind == "asymmetric" and self.noise.Q is None:
            raise ValueError("an N sweep with asymmetric noise needs 'noise.Q' for the varied basis")
        if self.noise.kind == "asymmetric" and not 0 <= self.noise.basis <= self.d:
            raise ValueError(f"noise.basis must be in 0..{self.d}")
        return self

    @property
    def targets(self) -> SecurityTargets:
        return SecurityTargets(eps=self.eps, eps_sec=self.eps_sec)

    def thresholds(self, Q: Optional[float] = None) -> NoiseThresholds:
        Q = self.noise.Q if Q is None else Q
        if self.noise.kind == "symmetric":
            return NoiseThresholds.symmetric(self.d, Q)
        if self.noise.kind == "asymmetric":
            return NoiseThresholds.asymmetric(self.d, self.noise.basis, Q, self.noise.fixed_Q)
        return NoiseThresholds(d=self.d, qhat=self.noise.qhat)


class SweepRow(BaseModel):
    axis: Union[int, float]
    rate: float
    ell: int
    m_opt: Optional[int]
    delta: Optional[float]
    flags: str = ""


class NonMonotonicityReport(BaseModel):
    intervals: List[Tuple[float, float]] = []
    flagged: bool = False
    note: str = ""
