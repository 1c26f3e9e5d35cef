"""
Locally robust estimation and inference for the gain-bound endpoints.

The moment for the lower endpoint is

    m(w, beta) = lower(x) * theta10(x) - upper(x) * theta01(x) - beta

(upper endpoint: roles of the CATE bounds swapped). Adding the first-stage
influence adjustment phi makes the moment insensitive to small nuisance
errors; with cross-fitting the estimator is the fold-wise sample mean of
m + phi and the variance is the mean square of the adjusted moment.

Adjustments exist for worst-case, MTR and the binary-monotone IV regimes.
Every other regime is estimated by plug-in only, without a confidence interval.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .data_loader import Dataset
from .errors import ArgumentError, BoundsError, NumericalError
from .first_stage import CellKey, CellTables, NuisanceFit, fit_cross_fitted, make_folds
from .identification import (
    PopulationDistribution,
    _arm_mean,
    _fold_groups,
    bounds_from_indicators,
    cate_bounds,
    crossing_diagnostics,
    population_gain_bounds,
)
from .models import (
    AdjustmentMode,
    AssumptionSpec,
    BoundsEstimate,
    FirstStageConfig,
    FoldAssignment,
    IvMode,
    OutcomeSupport,
    Regime,
    Side,
)
from .numerics import normal_quantile
from .policy import IndicatorVectors, PolicyPair, indicators_from_frame, policy_indicators

logger = logging.getLogger(__name__)

MODULE = "inference"

DEFAULT_SEED = 20240101
ADJUSTED_REGIMES = (Regime.WORST_CASE, Regime.MTR, Regime.IV_WORST_CASE, Regime.IV_MTR)


def supports_adjustment(spec: AssumptionSpec) -> bool:
    """True when the regime has an influence adjustment (and hence CIs)."""
    if spec.regime in (Regime.WORST_CASE, Regime.MTR):
        return True
    return spec.regime.uses_iv and spec.iv_mode == IvMode.BINARY_MONOTONE


# ==================== Context ====================

class MomentContext(BaseModel):
    """Which endpoint, regime, support and IV adjustment weighting a moment uses."""
    side: Side = Field(description="lower or upper endpoint")
    regime: Regime = Field(description="Regime with an influence adjustment")
    support: OutcomeSupport
    adjustment_mode: AdjustmentMode = Field(default=AdjustmentMode.INSTRUMENT_WEIGHTED)

    @model_validator(mode="after")
    def check_regime(self) -> "MomentContext":
        if self.regime not in ADJUSTED_REGIMES:
            raise ValueError(
                f"{self.regime.value} has no influence adjustment; it is estimated by plug-in only"
            )
        return self

    @property
    def spec(self) -> AssumptionSpec:
        mode = IvMode.BINARY_MONOTONE if self.regime.uses_iv else IvMode.NONE
        return AssumptionSpec(regime=self.regime, iv_mode=mode)


class Observation(BaseModel):
    """A single observation w = (y, d, x, z)."""
    y: float
    d: int = Field(ge=0, le=1)
    x: Dict[str, float] = Field(default_factory=dict)
    z: Optional[float] = None

    def frame(self, z_col: str = "z") -> pd.DataFrame:
        record = dict(self.x)
        if self.z is not None:
            record[z_col] = self.z
        return pd.DataFrame([record]) if record else pd.DataFrame(index=[0])


# ==================== Influence functions ====================

@dataclass(frozen=True)
class InfluenceTerms:
    """Influence functions of the CATE lower and upper bounds, per row."""
    lower: np.ndarray
    upper: np.ndarray


def worst_case_influence(
    fit: NuisanceFit,
    rows: pd.DataFrame,
    y: np.ndarray,
    d: np.ndarray,
    support: OutcomeSupport,
) -> InfluenceTerms:
    p = fit.p(rows)
    eta1 = _arm_mean(lambda r: fit.eta(1, r), rows, ((p > 0) | (d == 1)).astype(float))
    eta0 = _arm_mean(lambda r: fit.eta(0, r), rows, ((p < 1) | (d == 0)).astype(float))
    slope = eta1 + eta0 - (support.lower + support.upper)
    residual = np.where(d == 1, y - eta1, -(y - eta0))
    influence = slope * (d - p) + residual
    return InfluenceTerms(lower=influence, upper=influence)


def binary_iv_influence(
    fit: NuisanceFit,
    rows: pd.DataFrame,
    y: np.ndarray,
    d: np.ndarray,
    z: np.ndarray,
    support: OutcomeSupport,
    mode: AdjustmentMode,
) -> InfluenceTerms:
    """
    Z=1 rows carry the treated-arm channel (p(x,1), E[Y|D=1,X,Z=1]); Z=0 rows
    carry the control-arm channel. The instrument-weighted mode divides each
    branch by P(Z=z|X).
    """
    fit.require_instrument(MODULE)
    if not np.isin(z, (0.0, 1.0)).all():
        raise ArgumentError("binary-monotone adjustment needs a 0/1 instrument", module=MODULE)
    treated_branch = z == 1.0
    control_branch = ~treated_branch

    p1 = fit.p_z(rows, 1.0)
    p0 = fit.p_z(rows, 0.0)
    eta1 = _arm_mean(lambda r: fit.eta_z(1, r, 1.0), rows, ((p1 > 0) | (treated_branch & (d == 1))).astype(float))
    eta0 = _arm_mean(lambda r: fit.eta_z(0, r, 0.0), rows, ((p0 < 1) | (control_branch & (d == 0))).astype(float))

    if mode == AdjustmentMode.INSTRUMENT_WEIGHTED:
        fit.require_instrument_share(MODULE)
        r1 = fit.r_z(1.0, rows)
        r0 = fit.r_z(0.0, rows)
        if np.any((treated_branch & (r1 <= 0)) | (control_branch & (r0 <= 0))):
            raise NumericalError("instrument share is zero on a row observed at that level", module=MODULE)
        w1 = np.where(treated_branch, 1.0 / np.where(r1 > 0, r1, 1.0), 0.0)
        w0 = np.where(control_branch, 1.0 / np.where(r0 > 0, r0, 1.0), 0.0)
    else:
        w1 = treated_branch.astype(float)
        w0 = control_branch.astype(float)

    treated_residual = np.where(d == 1, y - eta1, 0.0)
    control_residual = np.where(d == 0, y - eta0, 0.0)
    outcome_part = w1 * treated_residual - w0 * control_residual

    lower = w1 * (eta1 - support.lower) * (d - p1) + w0 * (eta0 - support.upper) * (d - p0) + outcome_part
    upper = w1 * (eta1 - support.upper) * (d - p1) + w0 * (eta0 - support.lower) * (d - p0) + outcome_part
    return InfluenceTerms(lower=lower, upper=upper)


def influence_terms(
    ctx_regime: Regime,
    fit: NuisanceFit,
    rows: pd.DataFrame,
    y: np.ndarray,
    d: np.ndarray,
    z: Optional[np.ndarray],
    support: OutcomeSupport,
    mode: AdjustmentMode,
) -> InfluenceTerms:
    if ctx_regime.uses_iv:
        if z is None:
            raise ArgumentError("IV adjustment needs instrument values", module=MODULE)
        terms = binary_iv_influence(fit, rows, y, d, z, support, mode)
    else:
        terms = worst_case_influence(fit, rows, y, d, support)
    if ctx_regime.imposes_mtr:
        terms = InfluenceTerms(lower=np.zeros(len(rows)), upper=terms.upper)
    return terms


# ==================== Moment terms ====================

@dataclass(frozen=True)
class MomentTerms:
    """
    Per-row pieces of both moments: ``lower``/``upper`` are the CATE-bound
    combinations (m + beta) and ``phi_lower``/``phi_upper`` the adjustments.
    """
    lower: np.ndarray
    upper: np.ndarray
    phi_lower: np.ndarray
    phi_upper: np.ndarray
    diagnostics: List[str] = field(default_factory=list)


def moment_terms(
    spec: AssumptionSpec,
    fit: NuisanceFit,
    rows: pd.DataFrame,
    y: np.ndarray,
    d: np.ndarray,
    z: Optional[np.ndarray],
    theta10: np.ndarray,
    theta01: np.ndarray,
    support: OutcomeSupport,
    mode: AdjustmentMode = AdjustmentMode.INSTRUMENT_WEIGHTED,
    adjusted: bool = True,
) -> MomentTerms:
    """Moment pieces for rows that all share one fit."""
    theta10 = np.asarray(theta10, dtype=float)
    theta01 = np.asarray(theta01, dtype=float)
    bounds = cate_bounds(spec, fit, rows, support)
    lower = bounds.lower * theta10 - bounds.upper * theta01
    upper = bounds.upper * theta10 - bounds.lower * theta01

    if adjusted:
        influence = influence_terms(spec.regime, fit, rows, y, d, z, support, mode)
        phi_lower = theta10 * influence.lower - theta01 * influence.upper
        phi_upper = theta10 * influence.upper - theta01 * influence.lower
    else:
        phi_lower = np.zeros(len(rows))
        phi_upper = np.zeros(len(rows))

    diagnostics = crossing_diagnostics(bounds, rows.index)
    return MomentTerms(lower=lower, upper=upper, phi_lower=phi_lower, phi_upper=phi_upper, diagnostics=diagnostics)


def _single(w: Observation, fit: NuisanceFit, ctx: MomentContext, indicators: Tuple[int, int], adjusted: bool) -> MomentTerms:
    theta10, theta01 = indicators
    if theta10 and theta01:
        raise ArgumentError("theta10 and theta01 cannot both be one", module=MODULE)
    return moment_terms(
        ctx.spec, fit, w.frame(), np.array([w.y]), np.array([w.d]),
        None if w.z is None else np.array([w.z]),
        np.array([theta10]), np.array([theta01]), ctx.support, ctx.adjustment_mode, adjusted,
    )


def moment_m(w: Observation, beta: float, fit: NuisanceFit, ctx: MomentContext, indicators: Tuple[int, int]) -> float:
    """
    Unadjusted moment for one observation; linear in ``beta`` with slope -1.

    Rows whose assignment does not change return -beta without touching ``fit``.
    """
    if not any(indicators):
        return -float(beta)
    terms = _single(w, fit, ctx, indicators, adjusted=False)
    value = terms.lower if ctx.side == Side.LOWER else terms.upper
    return float(value[0]) - float(beta)


def adjustment_phi(w: Observation, fit: NuisanceFit, ctx: MomentContext, indicators: Tuple[int, int]) -> float:
    """First-stage influence adjustment for one observation."""
    if not any(indicators):
        return 0.0
    terms = _single(w, fit, ctx, indicators, adjusted=True)
    value = terms.phi_lower if ctx.side == Side.LOWER else terms.phi_upper
    return float(value[0])


def cross_fitted_moments(
    data: Dataset,
    indicators: IndicatorVectors,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment],
    mode: AdjustmentMode = AdjustmentMode.INSTRUMENT_WEIGHTED,
    adjusted: bool = True,
) -> MomentTerms:
    """Full-length moment pieces, each row under its fold's held-out fit; inactive rows are zero."""
    n = data.n
    pieces = {name: np.zeros(n) for name in ("lower", "upper", "phi_lower", "phi_upper")}
    diagnostics: List[str] = []
    active = indicators.active
    y, d, z = data.y, data.d, data.z

    for index, members in _fold_groups(active, folds):
        if members.size == 0:
            continue
        try:
            terms = moment_terms(
                spec, fits[index], data.frame.iloc[members], y[members], d[members],
                None if z is None else z[members],
                indicators.theta10[members], indicators.theta01[members],
                data.support, mode, adjusted,
            )
        except BoundsError as e:
            if folds is not None and e.fold is None:
                e.fold = index + 1
            raise
        for name in pieces:
            pieces[name][members] = getattr(terms, name)
        diagnostics.extend(terms.diagnostics)

    return MomentTerms(diagnostics=diagnostics, **pieces)


# ==================== Estimation ====================

@dataclass(frozen=True)
class EndpointEstimate:
    beta: float
    omega: float
    ci: Tuple[float, float]


def solve_endpoint(values: np.ndarray, c_alpha: float) -> EndpointEstimate:
    """
    Closed-form root of mean(values - beta) = 0 with its variance and CI.

    ``values`` is m + phi (+ beta) per row.
    """
    n = values.size
    beta = float(np.mean(values))
    omega = float(np.mean((values - beta) ** 2))
    half = c_alpha * math.sqrt(omega / n)
    return EndpointEstimate(beta=beta, omega=omega, ci=(beta - half, beta + half))


def cross_fit_estimate(
    data: Dataset,
    indicators: IndicatorVectors,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment],
    *,
    alpha: float = 0.95,
    seed: int = DEFAULT_SEED,
    first_stage: Optional[Dict] = None,
    mode: AdjustmentMode = AdjustmentMode.INSTRUMENT_WEIGHTED,
    adjusted: bool = True,
) -> BoundsEstimate:
    """
    Estimate both endpoints from already fitted nuisances.

    Regimes without an influence adjustment yield a point estimate only.
    """
    k = folds.k if folds is not None else 1
    provenance = dict(
        regime=spec.regime, alpha=alpha, n=data.n, k=k, seed=seed,
        first_stage=first_stage or {},
    )

    if not supports_adjustment(spec):
        result = bounds_from_indicators(data, indicators, spec, fits, folds)
        note = f"{spec.label}: point estimate only; no influence adjustment is available for this regime"
        logger.info(note)
        return BoundsEstimate(
            beta_l=result.beta_l, beta_u=result.beta_u, point_estimate_only=True,
            diagnostics=[note, *result.diagnostics], **provenance,
        )

    c_alpha = normal_quantile(alpha)
    terms = cross_fitted_moments(data, indicators, spec, fits, folds, mode, adjusted)
    lower = solve_endpoint(terms.lower + terms.phi_lower, c_alpha)
    upper = solve_endpoint(terms.upper + terms.phi_upper, c_alpha)
    return BoundsEstimate(
        beta_l=lower.beta,
        beta_u=upper.beta,
        omega_l=lower.omega,
        omega_u=upper.omega,
        ci_l=lower.ci,
        ci_u=upper.ci,
        adjustment_mode=mode if spec.regime.uses_iv else None,
        diagnostics=terms.diagnostics,
        **provenance,
    )


def lr_estimate(
    data: Dataset,
    pair: PolicyPair,
    spec: AssumptionSpec,
    *,
    k: int = 2,
    seed: int = DEFAULT_SEED,
    first_stage: Optional[FirstStageConfig] = None,
    alpha: float = 0.95,
    adjustment_mode: AdjustmentMode = AdjustmentMode.INSTRUMENT_WEIGHTED,
) -> BoundsEstimate:
    """
    Cross-fitted locally robust estimate of both gain-bound endpoints.

    Args:
        data: Observations
        pair: Benchmark and new policy
        spec: Regime
        k: Fold count
        seed: Fold shuffle seed
        first_stage: Nuisance estimation settings
        alpha: Confidence level
        adjustment_mode: Weighting of the IV adjustment branches

    Returns:
        BoundsEstimate; regimes without an adjustment carry point estimates only

    Raises:
        BoundsError: First-stage failures, annotated with the fold index
    """
    first_stage = first_stage or FirstStageConfig()
    indicators = policy_indicators(pair, data)
    folds = make_folds(data.n, k, seed)
    fits = fit_cross_fitted(data, folds, first_stage, instrument=spec.regime.needs_instrument)
    estimate = cross_fit_estimate(
        data, indicators, spec, fits, folds,
        alpha=alpha, seed=seed, first_stage=first_stage.model_dump(mode="json"), mode=adjustment_mode,
    )
    logger.info(
        f"{spec.label}: beta_l={estimate.beta_l:.2f}, beta_u={estimate.beta_u:.2f} "
        f"(n={data.n}, K={k}, seed={seed})"
    )
    return estimate


# ==================== Orthogonality check ====================

DEFAULT_TAUS = (-0.2, -0.1, -0.05, -0.025, 0.025, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class NuisanceDirection:
    """
    Perturbation of exact nuisances, keyed by covariate cell.

    ``eta1``/``eta0``/``p`` are keyed by cell; the z-conditional maps by
    cell + (z,).
    """
    eta1: Mapping[CellKey, float] = field(default_factory=dict)
    eta0: Mapping[CellKey, float] = field(default_factory=dict)
    p: Mapping[CellKey, float] = field(default_factory=dict)
    eta1_z: Mapping[CellKey, float] = field(default_factory=dict)
    eta0_z: Mapping[CellKey, float] = field(default_factory=dict)
    p_z: Mapping[CellKey, float] = field(default_factory=dict)
    r_z: Mapping[CellKey, float] = field(default_factory=dict)

    def as_tables(self, keys: Tuple[str, ...]) -> CellTables:
        eta = {cell + (1.0,): v for cell, v in self.eta1.items()}
        eta.update({cell + (0.0,): v for cell, v in self.eta0.items()})
        eta_z = {key + (1.0,): v for key, v in self.eta1_z.items()}
        eta_z.update({key + (0.0,): v for key, v in self.eta0_z.items()})
        return CellTables(keys=keys, eta=eta, p=dict(self.p), eta_z=eta_z, p_z=dict(self.p_z), r_z=dict(self.r_z))


class OrthogonalityReport(BaseModel):
    """Numerical derivative of the expected moment along a nuisance direction."""
    side: Side
    regime: Regime
    adjusted: bool
    slope: float
    residual_order: float = Field(description="Fitted power of the remainder; inf when it vanishes")
    scale: float
    taus: List[float]
    values: List[float] = Field(description="E[psi] - E[psi at tau=0] per tau")
    passed: bool


def _check_range(tables: CellTables, support: OutcomeSupport, tau: float) -> None:
    for name in ("eta", "eta_z"):
        values = list(getattr(tables, name).values())
        if values and (min(values) < support.lower or max(values) > support.upper):
            raise ArgumentError(f"perturbed {name} leaves the outcome support at tau={tau}", module=MODULE)
    for name in ("p", "p_z", "r_z"):
        values = list(getattr(tables, name).values())
        if values and (min(values) < 0.0 or max(values) > 1.0):
            raise ArgumentError(f"perturbed {name} leaves [0, 1] at tau={tau}", module=MODULE)


def expected_moment(
    dist: PopulationDistribution,
    ctx: MomentContext,
    tables: CellTables,
    indicators: IndicatorVectors,
    beta: float,
    adjusted: bool = True,
) -> float:
    """Exact population mean of the (adjusted) moment under the given nuisances."""
    frame = dist.frame
    fit = tables.to_fit(method="exact")
    z = frame[dist.z_col].to_numpy(dtype=float) if dist.z_col else None
    terms = moment_terms(
        ctx.spec, fit, frame, frame["y"].to_numpy(dtype=float), frame["d"].to_numpy(dtype=np.int64), z,
        indicators.theta10, indicators.theta01, ctx.support, ctx.adjustment_mode, adjusted,
    )
    values = terms.lower + terms.phi_lower if ctx.side == Side.LOWER else terms.upper + terms.phi_upper
    return float(np.dot(frame["prob"].to_numpy(dtype=float), values)) - beta


def orthogonality_check(
    dist: PopulationDistribution,
    ctx: MomentContext,
    pair: PolicyPair,
    direction: NuisanceDirection,
    taus: Sequence[float] = DEFAULT_TAUS,
    adjusted: bool = True,
) -> OrthogonalityReport:
    """
    Differentiate tau -> E[psi(w, beta0, gamma0 + tau * direction)] at zero.

    The slope comes from a least-squares cubic through the grid; the residual
    order is the log-log slope of the remainder after the linear term. The
    check passes when |slope| <= 1e-8 * (support width) and the order is at
    least 1.9.

    Raises:
        ArgumentError: A perturbed nuisance leaves its range
    """
    taus = [float(t) for t in taus if t != 0]
    if len(taus) < 3:
        raise ArgumentError("orthogonality check needs at least three nonzero steps", module=MODULE)

    pair.bind(dist.x_cols)
    base = dist.tables()
    step = direction.as_tables(base.keys)
    bounds = population_gain_bounds(dist, pair, ctx.spec, ctx.support)
    beta0 = bounds.beta_l if ctx.side == Side.LOWER else bounds.beta_u
    indicators = indicators_from_frame(pair, dist.frame)

    at_zero = expected_moment(dist, ctx, base, indicators, beta0, adjusted)
    values = []
    for tau in taus:
        perturbed = base.perturbed(step, tau)
        _check_range(perturbed, ctx.support, tau)
        values.append(expected_moment(dist, ctx, perturbed, indicators, beta0, adjusted) - at_zero)

    grid = np.asarray(taus)
    shifts = np.asarray(values)
    design = np.column_stack([grid, grid ** 2, grid ** 3])
    coef, *_ = np.linalg.lstsq(design, shifts, rcond=None)
    slope = float(coef[0])

    scale = ctx.support.width
    remainder = np.abs(shifts - slope * grid)
    floor = 1e-11 * max(1.0, scale)
    keep = remainder > floor
    if keep.sum() < 2:
        order = math.inf
    else:
        order = float(np.polyfit(np.log(np.abs(grid[keep])), np.log(remainder[keep]), 1)[0])

    passed = abs(slope) <= 1e-8 * scale and order >= 1.9
    logger.debug(
        f"Orthogonality {ctx.regime.value}/{ctx.side.value} adjusted={adjusted}: "
        f"slope={slope:.3e}, order={order:.2f}, passed={passed}"
    )
    return OrthogonalityReport(
        side=ctx.side, regime=ctx.regime, adjusted=adjusted, slope=slope, residual_order=order,
        scale=scale, taus=taus, values=values, passed=passed,
    )


__all__ = [
    'DEFAULT_SEED',
    'supports_adjustment',
    'MomentContext',
    'Observation',
    'InfluenceTerms',
    'worst_case_influence',
    'binary_iv_influence',
    'MomentTerms',
    'moment_terms',
    'moment_m',
    'adjustment_phi',
    'cross_fitted_moments',
    'EndpointEstimate',
    'solve_endpoint',
    'cross_fit_estimate',
    'lr_estimate',
    'NuisanceDirection',
    'OrthogonalityReport',
    'expected_moment',
    'orthogonality_check',
]
