"""
Closed-form identified sets for the welfare gain.

For a covariate cell x the conditional average treatment effect is bounded
by [lower(x), upper(x)]; the regime decides the formulas:

- worst-case: only the outcome support is used
- mtr: worst-case upper bound, lower bound 0
- iv-*: intersection over instrument levels (binary-monotone shortcut or a
  scan over the observed levels)
- miv-*: weighted running sup/inf over ordered instrument levels

Gain bounds aggregate the cell bounds over the rows whose assignment changes.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data_loader import Dataset
from .errors import ArgumentError, BoundsError, DomainError, EmptyCellError, NumericalError
from .first_stage import CellKey, CellTables, NuisanceFit
from .models import AssumptionSpec, FoldAssignment, GainBounds, IvMode, OutcomeSupport, Regime, SchemaMapping
from .policy import PolicyPair, PolicyRule, RuleLike, indicators_from_frame, policy_indicators, rule_values

logger = logging.getLogger(__name__)

MODULE = "identification"

CROSSING_TOLERANCE = 1e-9


# ==================== CATE bounds ====================

@dataclass(frozen=True)
class CateBounds:
    """Per-row bounds on E[Y1 - Y0 | X] (welfare units)."""
    lower: np.ndarray
    upper: np.ndarray

    def crossed(self, tol: float = CROSSING_TOLERANCE) -> np.ndarray:
        """Positions where lower exceeds upper."""
        scale = np.maximum(1.0, np.maximum(np.abs(self.lower), np.abs(self.upper)))
        return np.flatnonzero(self.lower - self.upper > tol * scale)


def _arm_mean(evaluate: Callable[[pd.DataFrame], np.ndarray], rows: pd.DataFrame, weight: np.ndarray) -> np.ndarray:
    """Arm mean where the arm has mass; zero where it is multiplied by zero anyway."""
    out = np.zeros(len(rows))
    live = np.flatnonzero(weight > 0)
    if live.size:
        out[live] = evaluate(rows.iloc[live])
    return out


def worst_case_terms(fit: NuisanceFit, rows: pd.DataFrame, support: OutcomeSupport) -> CateBounds:
    p = fit.p(rows)
    eta1 = _arm_mean(lambda r: fit.eta(1, r), rows, p)
    eta0 = _arm_mean(lambda r: fit.eta(0, r), rows, 1.0 - p)
    lower = (eta1 - support.upper) * p + (support.lower - eta0) * (1.0 - p)
    upper = (eta1 - support.lower) * p + (support.upper - eta0) * (1.0 - p)
    return CateBounds(lower=lower, upper=upper)


@dataclass(frozen=True)
class InstrumentTerms:
    """
    Bounds on E[Y1|X,Z=z] and E[Y0|X,Z=z] for each level (rows = levels).

    treated_low/high bracket E[Y1|X,Z=z]; control_low/high bracket E[Y0|X,Z=z];
    observed is E[Y|X,Z=z].
    """
    levels: Tuple[float, ...]
    treated_low: np.ndarray
    treated_high: np.ndarray
    control_low: np.ndarray
    control_high: np.ndarray
    observed: np.ndarray


def instrument_terms(
    fit: NuisanceFit,
    rows: pd.DataFrame,
    levels: Sequence[float],
    support: OutcomeSupport,
) -> InstrumentTerms:
    fit.require_instrument(MODULE)
    stacks: Dict[str, List[np.ndarray]] = defaultdict(list)
    for level in levels:
        p = fit.p_z(rows, level)
        eta1 = _arm_mean(lambda r: fit.eta_z(1, r, level), rows, p)
        eta0 = _arm_mean(lambda r: fit.eta_z(0, r, level), rows, 1.0 - p)
        stacks["treated_low"].append(eta1 * p + support.lower * (1.0 - p))
        stacks["treated_high"].append(eta1 * p + support.upper * (1.0 - p))
        stacks["control_low"].append(support.lower * p + eta0 * (1.0 - p))
        stacks["control_high"].append(support.upper * p + eta0 * (1.0 - p))
        stacks["observed"].append(eta1 * p + eta0 * (1.0 - p))
    return InstrumentTerms(levels=tuple(float(v) for v in levels), **{k: np.vstack(v) for k, v in stacks.items()})


def _binary_levels(fit: NuisanceFit) -> None:
    if tuple(fit.z_levels) != (0.0, 1.0):
        raise ArgumentError(
            f"binary-monotone mode needs instrument levels {{0, 1}}, fit has {list(fit.z_levels)}",
            module=MODULE,
        )


def binary_iv_terms(fit: NuisanceFit, rows: pd.DataFrame, support: OutcomeSupport) -> CateBounds:
    """IV worst-case bounds when Z=1 raises take-up: Z=1 pins the treated arm, Z=0 the control arm."""
    fit.require_instrument(MODULE)
    _binary_levels(fit)
    p1 = fit.p_z(rows, 1.0)
    p0 = fit.p_z(rows, 0.0)
    eta1 = _arm_mean(lambda r: fit.eta_z(1, r, 1.0), rows, p1)
    eta0 = _arm_mean(lambda r: fit.eta_z(0, r, 0.0), rows, 1.0 - p0)
    lower = (eta1 * p1 + support.lower * (1.0 - p1)) - (support.upper * p0 + eta0 * (1.0 - p0))
    upper = (eta1 * p1 + support.upper * (1.0 - p1)) - (support.lower * p0 + eta0 * (1.0 - p0))
    return CateBounds(lower=lower, upper=upper)


def general_iv_terms(fit: NuisanceFit, rows: pd.DataFrame, support: OutcomeSupport) -> CateBounds:
    """IV worst-case bounds by scanning every instrument level."""
    terms = instrument_terms(fit, rows, fit.z_levels, support)
    lower = terms.treated_low.max(axis=0) - terms.control_high.min(axis=0)
    upper = terms.treated_high.min(axis=0) - terms.control_low.max(axis=0)
    return CateBounds(lower=lower, upper=upper)


def miv_terms(spec: AssumptionSpec, fit: NuisanceFit, rows: pd.DataFrame, support: OutcomeSupport) -> CateBounds:
    """Weighted running sup (levels at or below) and inf (levels at or above)."""
    terms = instrument_terms(fit, rows, spec.miv_levels, support)
    weights = np.asarray(spec.miv_weights, dtype=float)[:, None]

    def sup_below(values: np.ndarray) -> np.ndarray:
        return np.maximum.accumulate(values, axis=0)

    def inf_above(values: np.ndarray) -> np.ndarray:
        return np.minimum.accumulate(values[::-1], axis=0)[::-1]

    upper = np.sum(weights * (inf_above(terms.treated_high) - sup_below(terms.control_low)), axis=0)
    if spec.regime == Regime.MIV_MTR:
        lower = np.sum(weights * (sup_below(terms.observed) - inf_above(terms.observed)), axis=0)
    else:
        lower = np.sum(weights * (sup_below(terms.treated_low) - inf_above(terms.control_high)), axis=0)
    return CateBounds(lower=lower, upper=upper)


def cate_bounds(
    spec: AssumptionSpec,
    fit: NuisanceFit,
    rows: pd.DataFrame,
    support: OutcomeSupport,
) -> CateBounds:
    """
    Bounds on the conditional average treatment effect for each row of ``rows``.

    Args:
        spec: Regime and instrument metadata
        fit: Nuisance evaluators (z-conditional ones for IV and MIV regimes)
        rows: Covariate rows; a single covariate vector is a one-row frame
        support: Declared outcome support

    Returns:
        CateBounds aligned with ``rows``

    Raises:
        ArgumentError: The fit lacks evaluators the regime needs
    """
    regime = spec.regime
    if regime in (Regime.WORST_CASE, Regime.MTR):
        bounds = worst_case_terms(fit, rows, support)
    elif regime.uses_iv:
        if spec.iv_mode == IvMode.BINARY_MONOTONE:
            bounds = binary_iv_terms(fit, rows, support)
        else:
            bounds = general_iv_terms(fit, rows, support)
    else:
        bounds = miv_terms(spec, fit, rows, support)

    if regime in (Regime.MTR, Regime.IV_MTR):
        bounds = CateBounds(lower=np.zeros(len(rows)), upper=bounds.upper)
    return bounds


# ==================== Gain bounds ====================

def _fold_groups(positions: np.ndarray, folds: Optional[FoldAssignment]) -> List[Tuple[int, np.ndarray]]:
    """(fit index, positions) pairs; a single group when there are no folds."""
    if folds is None:
        return [(0, positions)]
    fold_of = np.asarray(folds.fold_of)[positions]
    return [(k - 1, positions[fold_of == k]) for k in range(1, folds.k + 1)]


def cross_fitted_cate(
    data: Dataset,
    positions: np.ndarray,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment],
) -> CateBounds:
    """CATE bounds at ``positions``, each row under its own fold's fit."""
    lower = np.zeros(data.n)
    upper = np.zeros(data.n)
    for index, members in _fold_groups(positions, folds):
        if members.size == 0:
            continue
        try:
            bounds = cate_bounds(spec, fits[index], data.frame.iloc[members], data.support)
        except BoundsError as e:
            if folds is not None and e.fold is None:
                e.fold = index + 1
            raise
        lower[members] = bounds.lower
        upper[members] = bounds.upper
    return CateBounds(lower=lower[positions], upper=upper[positions])


def crossing_diagnostics(bounds: CateBounds, labels: Sequence[int], limit: int = 5) -> List[str]:
    crossed = bounds.crossed()
    if crossed.size == 0:
        return []
    shown = ", ".join(str(int(labels[i])) for i in crossed[:limit])
    message = (
        f"CATE lower bound exceeds upper bound on {crossed.size} row(s) (e.g. rows {shown}); "
        "nuisance estimates are mutually inconsistent there"
    )
    logger.warning(message)
    return [message]


def _bounds_from_psi(
    data: Dataset,
    psi: np.ndarray,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment],
) -> GainBounds:
    lower = np.zeros(data.n)
    upper = np.zeros(data.n)
    active = np.flatnonzero(psi != 0)
    diagnostics: List[str] = []
    if active.size:
        bounds = cross_fitted_cate(data, active, spec, fits, folds)
        weight = np.abs(psi[active])
        gaining = psi[active] > 0
        lower[active] = np.where(gaining, bounds.lower, -bounds.upper) * weight
        upper[active] = np.where(gaining, bounds.upper, -bounds.lower) * weight
        diagnostics = crossing_diagnostics(bounds, data.frame.index[active])

    result = GainBounds(beta_l=float(np.mean(lower)), beta_u=float(np.mean(upper)), diagnostics=diagnostics)
    logger.debug(f"{spec.label}: plug-in bounds ({result.beta_l:.4f}, {result.beta_u:.4f}) over {active.size} active rows")
    return result


def bounds_from_indicators(
    data: Dataset,
    indicators,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment] = None,
) -> GainBounds:
    """Plug-in bounds for precomputed policy indicators."""
    return _bounds_from_psi(data, indicators.difference, spec, fits, folds)


def plug_in_gain_bounds(
    data: Dataset,
    pair: PolicyPair,
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment] = None,
) -> GainBounds:
    """
    Sample analog of the gain bounds: mean of lower*theta10 - upper*theta01
    (and the mirror image for the upper endpoint).

    Args:
        data: Observations
        pair: Benchmark and new policy
        spec: Regime
        fits: One fit per fold (a single fit when ``folds`` is None)
        folds: Fold assignment; each row is evaluated under its fold's fit

    Rows whose assignment does not change contribute zero and never reach
    the first stage.
    """
    if folds is not None and len(fits) != folds.k:
        raise ArgumentError(f"expected {folds.k} fold fits, got {len(fits)}", module=MODULE)
    return bounds_from_indicators(data, policy_indicators(pair, data), spec, fits, folds)


def weighted_gain_bounds(
    data: Dataset,
    delta: RuleLike,
    delta_star: RuleLike,
    w: Union[float, Callable[[pd.DataFrame], Sequence[float]]],
    spec: AssumptionSpec,
    fits: Sequence[NuisanceFit],
    folds: Optional[FoldAssignment] = None,
) -> GainBounds:
    """
    Bounds on E[w(X) (delta(X) - delta*(X)) (Y1 - Y0)] for randomized rules.

    With psi = w * (delta - delta*), the lower endpoint averages
    lower*|psi| on psi >= 0 and -upper*|psi| on psi < 0.

    Raises:
        ArgumentError: Negative weight or rule values outside [0, 1]
    """
    frame = data.frame
    for rule in (delta, delta_star):
        if isinstance(rule, PolicyRule):
            rule.bind(data.x_cols)
    new = rule_values(delta, frame, "delta")
    old = rule_values(delta_star, frame, "delta_star")
    if callable(w):
        weight = np.asarray(w(frame), dtype=float)
    else:
        weight = np.full(data.n, float(w))
    if weight.shape != (data.n,) or np.any(~np.isfinite(weight)):
        raise ArgumentError("weight function must return one finite value per row", module=MODULE)
    if np.any(weight < 0):
        bad = int(np.flatnonzero(weight < 0)[0])
        raise ArgumentError("weight function must be nonnegative", module=MODULE, row=bad)
    return _bounds_from_psi(data, weight * (new - old), spec, fits, folds)


# ==================== Exact population ====================

@dataclass(frozen=True)
class PopulationDistribution:
    """
    Finite joint distribution of (Y, D, X[, Z]).

    ``frame`` holds one atom per row with columns y, d, the covariates,
    optionally z, and prob.
    """
    frame: pd.DataFrame
    x_cols: Tuple[str, ...]
    z_col: Optional[str]
    support: OutcomeSupport

    @classmethod
    def from_atoms(
        cls,
        atoms: Sequence[Mapping[str, float]],
        x_cols: Sequence[str],
        support: OutcomeSupport,
        z_col: Optional[str] = None,
    ) -> "PopulationDistribution":
        frame = pd.DataFrame(list(atoms))
        required = ["y", "d", "prob", *x_cols] + ([z_col] if z_col else [])
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise ArgumentError(f"population atoms lack {missing}", module=MODULE)
        prob = frame["prob"].to_numpy(dtype=float)
        if np.any(prob < 0) or abs(prob.sum() - 1.0) > 1e-12:
            raise ArgumentError(f"atom probabilities must be nonnegative and sum to 1, got {prob.sum()!r}", module=MODULE)
        if not np.isin(frame["d"].to_numpy(), (0, 1)).all():
            raise DomainError("population treatment must be 0 or 1", module=MODULE, column="d")
        y = frame["y"].to_numpy(dtype=float)
        if np.any(y < support.lower) or np.any(y > support.upper):
            raise DomainError("population outcome outside support", module=MODULE, column="y")
        return cls(frame=frame.reset_index(drop=True), x_cols=tuple(x_cols), z_col=z_col, support=support)

    def _atoms(self):
        columns = list(self.x_cols)
        for record in self.frame.to_dict("records"):
            cell = tuple(float(record[c]) for c in columns)
            z = float(record[self.z_col]) if self.z_col else None
            yield cell, z, int(record["d"]), float(record["y"]), float(record["prob"])

    def covariate_cells(self) -> Dict[CellKey, float]:
        """P(X = x) for every covariate cell with positive mass."""
        mass: Dict[CellKey, float] = defaultdict(float)
        for cell, _, _, _, prob in self._atoms():
            mass[cell] += prob
        return {cell: m for cell, m in sorted(mass.items()) if m > 0}

    def instrument_marginal(self) -> Dict[float, float]:
        """P(Z = z) for every instrument level with positive mass."""
        if self.z_col is None:
            raise ArgumentError("population has no instrument", module=MODULE)
        mass: Dict[float, float] = defaultdict(float)
        for _, z, _, _, prob in self._atoms():
            mass[z] += prob
        return {z: m for z, m in sorted(mass.items()) if m > 0}

    def tables(self) -> CellTables:
        """Exact conditional means; cells with zero mass are left out."""
        mass_x: Dict[CellKey, float] = defaultdict(float)
        mass_xd: Dict[CellKey, float] = defaultdict(float)
        ysum_xd: Dict[CellKey, float] = defaultdict(float)
        mass_xz: Dict[CellKey, float] = defaultdict(float)
        mass_xzd: Dict[CellKey, float] = defaultdict(float)
        ysum_xzd: Dict[CellKey, float] = defaultdict(float)

        for cell, z, d, y, prob in self._atoms():
            mass_x[cell] += prob
            mass_xd[cell + (float(d),)] += prob
            ysum_xd[cell + (float(d),)] += prob * y
            if z is not None:
                mass_xz[cell + (z,)] += prob
                mass_xzd[cell + (z, float(d))] += prob
                ysum_xzd[cell + (z, float(d))] += prob * y

        eta = {key: ysum_xd[key] / m for key, m in mass_xd.items() if m > 0}
        p = {cell: mass_xd.get(cell + (1.0,), 0.0) / m for cell, m in mass_x.items() if m > 0}
        if self.z_col is None:
            return CellTables(keys=self.x_cols, eta=eta, p=p)

        eta_z = {key: ysum_xzd[key] / m for key, m in mass_xzd.items() if m > 0}
        p_z = {key: mass_xzd.get(key + (1.0,), 0.0) / m for key, m in mass_xz.items() if m > 0}
        r_z = {key: m / mass_x[key[:-1]] for key, m in mass_xz.items() if m > 0}
        levels = tuple(sorted(self.instrument_marginal()))
        return CellTables(keys=self.x_cols, eta=eta, p=p, eta_z=eta_z, p_z=p_z, r_z=r_z, z_levels=levels)

    def cell_frame(self) -> Tuple[pd.DataFrame, np.ndarray]:
        """One row per covariate cell and the matching P(X = x)."""
        cells = self.covariate_cells()
        frame = pd.DataFrame(list(cells), columns=list(self.x_cols))
        return frame, np.fromiter(cells.values(), dtype=float)

    def to_dataset(self, copies: int) -> Dataset:
        """
        Dataset listing each atom prob * copies times.

        Raises:
            ArgumentError: prob * copies is not an integer for some atom
        """
        counts = self.frame["prob"].to_numpy(dtype=float) * copies
        rounded = np.round(counts)
        if np.any(np.abs(counts - rounded) > 1e-9):
            raise ArgumentError(f"atom probabilities are not multiples of 1/{copies}", module=MODULE)
        frame = self.frame.loc[self.frame.index.repeat(rounded.astype(int))].drop(columns="prob")
        schema = SchemaMapping(y="y", d="d", x=list(self.x_cols), z=self.z_col)
        return Dataset.from_frame(frame.reset_index(drop=True), schema, self.support)


def population_gain_bounds(
    dist: PopulationDistribution,
    pair: PolicyPair,
    spec: AssumptionSpec,
    support: Optional[OutcomeSupport] = None,
) -> GainBounds:
    """
    Exact gain bounds of a finite population; no estimation involved.

    Raises:
        NumericalError: A formula needs a conditional mean on a zero-probability cell
    """
    support = support or dist.support
    frame, mass = dist.cell_frame()
    pair.bind(dist.x_cols)
    fit = dist.tables().to_fit(method="exact")
    indicators = indicators_from_frame(pair, frame)
    psi = indicators.difference
    try:
        bounds = cate_bounds(spec, fit, frame, support)
    except EmptyCellError as e:
        raise NumericalError(f"zero-probability conditioning cell: {e.message}", module=MODULE) from e

    lower = np.where(psi > 0, bounds.lower, np.where(psi < 0, -bounds.upper, 0.0))
    upper = np.where(psi > 0, bounds.upper, np.where(psi < 0, -bounds.lower, 0.0))
    return GainBounds(beta_l=float(np.dot(mass, lower)), beta_u=float(np.dot(mass, upper)))


def miv_spec_for(dist: PopulationDistribution, regime: Regime) -> AssumptionSpec:
    """MIV assumption spec whose weights are the population instrument marginal."""
    marginal = dist.instrument_marginal()
    levels = list(marginal)
    weights = np.array(list(marginal.values()))
    weights = (weights / weights.sum()).tolist()
    return AssumptionSpec(regime=regime, miv_levels=levels, miv_weights=weights)


__all__ = [
    'CateBounds',
    'InstrumentTerms',
    'cate_bounds',
    'worst_case_terms',
    'binary_iv_terms',
    'general_iv_terms',
    'miv_terms',
    'instrument_terms',
    'cross_fitted_cate',
    'crossing_diagnostics',
    'bounds_from_indicators',
    'plug_in_gain_bounds',
    'weighted_gain_bounds',
    'PopulationDistribution',
    'population_gain_bounds',
    'miv_spec_for',
]
