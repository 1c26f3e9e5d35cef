"""
Data models for the welfare-bounds toolkit.

Pydantic records shared by every module: assumption regimes, outcome support,
schema mapping, fold assignments, bound estimates, coverage reports and the
run result returned by the orchestrator.
"""

import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

SPEC_VERSION = "1.0"


# ==================== Enumerations ====================

class Regime(str, Enum):
    """Identification regime: which maintained assumptions shape the bounds."""
    WORST_CASE = "worst-case"
    MTR = "mtr"
    IV_WORST_CASE = "iv-worst-case"
    IV_MTR = "iv-mtr"
    MIV_WORST_CASE = "miv-worst-case"
    MIV_MTR = "miv-mtr"

    @property
    def uses_iv(self) -> bool:
        return self in (Regime.IV_WORST_CASE, Regime.IV_MTR)

    @property
    def uses_miv(self) -> bool:
        return self in (Regime.MIV_WORST_CASE, Regime.MIV_MTR)

    @property
    def needs_instrument(self) -> bool:
        return self.uses_iv or self.uses_miv

    @property
    def imposes_mtr(self) -> bool:
        return self in (Regime.MTR, Regime.IV_MTR, Regime.MIV_MTR)


class IvMode(str, Enum):
    NONE = "none"
    BINARY_MONOTONE = "binary-monotone"
    GENERAL_DISCRETE = "general-discrete"


class AdjustmentMode(str, Enum):
    """How the instrument branches of the IV adjustment term are weighted."""
    PAPER_FAITHFUL = "paper-faithful"
    INSTRUMENT_WEIGHTED = "instrument-weighted"


class Side(str, Enum):
    LOWER = "lower"
    UPPER = "upper"


class FirstStageMethod(str, Enum):
    CELL_MEANS = "cell-means"
    POLYNOMIAL = "polynomial"


class EmptyCellPolicy(str, Enum):
    ERROR = "error"
    ZERO = "zero"


# ==================== Data description ====================

class OutcomeSupport(BaseModel):
    """Declared outcome bounds [lower, upper]; never inferred from data."""
    lower: float = Field(description="y lower bound")
    upper: float = Field(description="y upper bound")

    @model_validator(mode="after")
    def check_bounds(self) -> "OutcomeSupport":
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("outcome support must be finite")
        if not self.lower < self.upper:
            raise ValueError(
                f"degenerate outcome support ({self.lower}, {self.upper}): lower must be below upper"
            )
        return self

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def as_tuple(self) -> Tuple[float, float]:
        return (self.lower, self.upper)


class SchemaMapping(BaseModel):
    """Maps CSV column names to the roles y, d, x and z."""
    y: str = Field(description="Outcome column")
    d: str = Field(description="Binary treatment column")
    x: List[str] = Field(default_factory=list, description="Covariate columns")
    z: Optional[str] = Field(default=None, description="Instrument column")
    extra: List[str] = Field(
        default_factory=list,
        description="Additional numeric columns kept for later use (e.g. an MIV instrument)"
    )

    @model_validator(mode="after")
    def check_unique(self) -> "SchemaMapping":
        names = self.columns()
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"columns mapped to more than one role: {duplicates}")
        return self

    def columns(self) -> List[str]:
        names = [self.y, self.d, *self.x]
        if self.z is not None:
            names.append(self.z)
        names.extend(self.extra)
        return names


# ==================== Assumptions ====================

class AssumptionSpec(BaseModel):
    """Identification regime plus the instrument metadata it needs."""
    regime: Regime = Field(description="Identification regime")
    iv_mode: IvMode = Field(default=IvMode.NONE, description="How IV sup/inf are evaluated")
    miv_levels: Optional[List[float]] = Field(
        default=None, description="Ordered MIV instrument levels"
    )
    miv_weights: Optional[List[float]] = Field(
        default=None, description="P(Z=z) for each MIV level"
    )

    @model_validator(mode="after")
    def check_instrument_metadata(self) -> "AssumptionSpec":
        if self.regime.uses_iv and self.iv_mode == IvMode.NONE:
            raise ValueError(f"{self.regime.value} requires iv_mode binary-monotone or general-discrete")
        if self.regime.uses_miv:
            if not self.miv_levels or len(self.miv_levels) < 2:
                raise ValueError(f"{self.regime.value} requires at least two ordered instrument levels")
            if list(self.miv_levels) != sorted(set(self.miv_levels)):
                raise ValueError("miv_levels must be strictly increasing")
            if self.miv_weights is None or len(self.miv_weights) != len(self.miv_levels):
                raise ValueError("miv_weights must give one P(Z=z) per level")
            if any(w < 0 for w in self.miv_weights):
                raise ValueError("miv_weights must be nonnegative")
            if abs(sum(self.miv_weights) - 1.0) > 1e-12:
                raise ValueError(f"miv_weights sum to {sum(self.miv_weights)!r}, expected 1")
        return self

    @property
    def label(self) -> str:
        return self.regime.value


# ==================== Cross-fitting ====================

class FoldAssignment(BaseModel):
    """Balanced partition of observation positions into folds 1..k."""
    k: int = Field(ge=1, description="Fold count")
    seed: int = Field(description="Seed used for the shuffle")
    fold_of: List[int] = Field(description="Fold index (1..k) per observation")

    @field_validator("fold_of")
    @classmethod
    def check_fold_range(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("fold assignment must cover at least one observation")
        return v

    @property
    def n(self) -> int:
        return len(self.fold_of)

    def members(self, fold: int) -> np.ndarray:
        """Positions of the observations held out in ``fold``."""
        return np.flatnonzero(np.asarray(self.fold_of) == fold)

    def complement(self, fold: int) -> np.ndarray:
        """Positions of the training observations for ``fold``."""
        return np.flatnonzero(np.asarray(self.fold_of) != fold)


class FirstStageConfig(BaseModel):
    """Nuisance estimation settings."""
    method: FirstStageMethod = Field(default=FirstStageMethod.CELL_MEANS)
    degree: int = Field(default=2, ge=0, description="Outcome regression degree")
    propensity_degree: Optional[int] = Field(
        default=None, ge=0, description="Logistic propensity degree (defaults to degree)"
    )
    empty_cell_policy: EmptyCellPolicy = Field(default=EmptyCellPolicy.ERROR)
    fallback_value: float = Field(default=0.0, description="Value used for empty cells under the zero policy")

    @property
    def effective_propensity_degree(self) -> int:
        return self.degree if self.propensity_degree is None else self.propensity_degree


# ==================== Results ====================

class GainBounds(BaseModel):
    """Welfare-gain bounds [beta_l, beta_u] (welfare units)."""
    beta_l: float
    beta_u: float
    diagnostics: List[str] = Field(default_factory=list)


class BoundsEstimate(BaseModel):
    """Estimated bound endpoints with variances, CIs and provenance."""
    regime: Regime
    beta_l: float
    beta_u: float
    omega_l: Optional[float] = None
    omega_u: Optional[float] = None
    ci_l: Optional[Tuple[float, float]] = None
    ci_u: Optional[Tuple[float, float]] = None
    alpha: float
    n: int
    k: int
    seed: int
    first_stage: Dict[str, Any] = Field(default_factory=dict)
    adjustment_mode: Optional[AdjustmentMode] = None
    point_estimate_only: bool = False
    diagnostics: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_variances(self) -> "BoundsEstimate":
        for name in ("omega_l", "omega_u"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        return self

    def to_payload(self) -> Dict[str, Any]:
        """Canonical JSON-ready dictionary."""
        payload = self.model_dump(mode="json")
        for key in ("ci_l", "ci_u"):
            if payload[key] is not None:
                payload[key] = list(payload[key])
        return payload


class CoverageCell(BaseModel):
    """Coverage and average CI length for one (n, estimator, fitting) cell."""
    n: int
    estimator: str = Field(description="original or debiased")
    fitting: str = Field(description="no-crossfit, crossfit or true-nuisance")
    coverage: float = Field(ge=0.0, le=1.0)
    average_length: float = Field(ge=0.0)
    reps_used: int


class CoverageReport(BaseModel):
    """Monte Carlo coverage study output."""
    spec_version: str = SPEC_VERSION
    target_regime: Regime
    target_side: Side
    target_value: float
    alpha: float
    reps: int
    seed: int
    failed_reps: Dict[str, int] = Field(default_factory=dict, description="Failures per sample size")
    cells: List[CoverageCell] = Field(default_factory=list)

    def cell(self, n: int, estimator: str, fitting: str) -> CoverageCell:
        for item in self.cells:
            if item.n == n and item.estimator == estimator and item.fitting == fitting:
                return item
        raise KeyError(f"no coverage cell for n={n}, {estimator}, {fitting}")


class OracleResult(BaseModel):
    """Population quantities from the simulation design."""
    spec_version: str = SPEC_VERSION
    regime: str
    value: Optional[float] = None
    beta_l: Optional[float] = None
    beta_u: Optional[float] = None
    breakdown: Dict[str, float] = Field(
        default_factory=dict, description="Per covariate level contribution"
    )


# ==================== Validation ====================

class ValidationIssue(BaseModel):
    """One validation finding."""
    field: str = Field(description="Configuration key or column")
    error_type: str = Field(description="Category")
    message: str = Field(description="Human readable message")


class ValidationResult(BaseModel):
    is_valid: bool
    errors: List[ValidationIssue] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


# ==================== Run result ====================

class EstimationResult(BaseModel):
    """Outcome of one orchestrated command."""
    success: bool
    command: str
    payload: Dict[str, Any] = Field(default_factory=dict, description="Canonical JSON payload")
    text: Optional[str] = Field(default=None, description="Aligned-text rendering")
    output_path: Optional[str] = None
    errors: List[str] = Field(default_factory=list)
    exit_code: int = 0
    diagnostics: List[str] = Field(default_factory=list)
    metrics: Dict[str, Any] = Field(default_factory=dict, description="Timings, not part of the payload")


__all__ = [
    'SPEC_VERSION',
    'Regime',
    'IvMode',
    'AdjustmentMode',
    'Side',
    'FirstStageMethod',
    'EmptyCellPolicy',
    'OutcomeSupport',
    'SchemaMapping',
    'AssumptionSpec',
    'FoldAssignment',
    'FirstStageConfig',
    'GainBounds',
    'BoundsEstimate',
    'CoverageCell',
    'CoverageReport',
    'OracleResult',
    'ValidationIssue',
    'ValidationResult',
    'EstimationResult',
]
