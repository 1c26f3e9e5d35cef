"""
First-stage nuisance estimation and cross-fitting folds.

Two estimator families are provided:

- cell means for discrete conditioning variables (empirical averages per cell)
- polynomial least squares for E[Y|D=d,X] with logistic IRLS for P(D=1|X)

Both produce a :class:`NuisanceFit`, a bundle of evaluators that the bound
formulas consume. A fit only ever sees its training rows.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit

from .data_loader import Dataset
from .errors import ArgumentError, BoundsError, EmptyCellError, NumericalError
from .models import EmptyCellPolicy, FirstStageConfig, FirstStageMethod, FoldAssignment

logger = logging.getLogger(__name__)

MODULE = "first-stage"

IRLS_MAX_ITER = 100
IRLS_COEF_TOL = 1e-8
IRLS_LOGLIK_TOL = 1e-10
SEPARATION_COEF_NORM = 1e4
SEPARATION_LINEAR_PREDICTOR = 30.0

CellKey = Tuple[float, ...]


# ==================== Folds ====================

def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """
    Balanced random partition of positions 0..n-1 into folds 1..k.

    A seeded permutation is dealt round-robin, so fold sizes differ by at
    most one and the assignment depends on (n, k, seed) only.

    Raises:
        ArgumentError: k < 2 or k > n
    """
    if k < 2 or k > n:
        raise ArgumentError(f"fold count must satisfy 2 <= K <= n, got K={k}, n={n}", module=MODULE)
    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k + 1
    return FoldAssignment(k=k, seed=seed, fold_of=fold_of.tolist())


# ==================== Nuisance bundle ====================

Evaluator = Callable[..., np.ndarray]


@dataclass(frozen=True)
class NuisanceFit:
    """
    Evaluators for the first-stage quantities.

    Attributes:
        eta: (d, rows) -> E[Y|D=d, X]
        p: rows -> P(D=1|X)
        eta_z: (d, rows, z) -> E[Y|D=d, X, Z=z]
        p_z: (rows, z) -> P(D=1|X, Z=z)
        r_z: (z, rows) -> P(Z=z|X)
        z_levels: instrument levels seen in training, ascending
    """
    eta: Evaluator
    p: Evaluator
    eta_z: Optional[Evaluator] = None
    p_z: Optional[Evaluator] = None
    r_z: Optional[Evaluator] = None
    z_levels: Tuple[float, ...] = ()
    method: str = FirstStageMethod.CELL_MEANS.value
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def has_instrument(self) -> bool:
        return self.eta_z is not None and self.p_z is not None

    def require_instrument(self, module: str = MODULE) -> None:
        if not self.has_instrument:
            raise ArgumentError(
                "regime needs z-conditional evaluators but the first stage was fit without an instrument",
                module=module,
            )

    def require_instrument_share(self, module: str = MODULE) -> None:
        if self.r_z is None:
            raise ArgumentError(
                "instrument-weighted adjustment needs P(Z=z|X) but the first stage has no instrument-share model",
                module=module,
            )


# ==================== Cell tables ====================

def _cell_key(values: Iterable[Any]) -> CellKey:
    return tuple(float(v) for v in values)


class CellTable:
    """Lookup of per-cell values keyed by covariate cell plus a suffix."""

    def __init__(
        self,
        name: str,
        keys: Sequence[str],
        values: Dict[CellKey, float],
        empty_cell_policy: EmptyCellPolicy = EmptyCellPolicy.ERROR,
        fallback_value: float = 0.0,
    ):
        self.name = name
        self.keys = tuple(keys)
        self.values = values
        self.empty_cell_policy = EmptyCellPolicy(empty_cell_policy)
        self.fallback_value = float(fallback_value)

    def _cells(self, rows: pd.DataFrame) -> List[CellKey]:
        if not self.keys:
            return [()] * len(rows)
        return [_cell_key(cell) for cell in rows.loc[:, list(self.keys)].itertuples(index=False, name=None)]

    def lookup(self, rows: pd.DataFrame, suffix: Sequence[float] = ()) -> np.ndarray:
        suffix = _cell_key(suffix)
        out = np.empty(len(rows), dtype=float)
        for pos, cell in enumerate(self._cells(rows)):
            value = self.values.get(cell + suffix)
            if value is None:
                if self.empty_cell_policy == EmptyCellPolicy.ERROR:
                    described = dict(zip(self.keys, cell))
                    raise EmptyCellError(
                        f"{self.name}: cell {described} with {suffix} has no training rows; "
                        "use empty_cell_policy 'zero' to substitute the fallback value",
                        module=MODULE, row=int(rows.index[pos]),
                    )
                value = self.fallback_value
            out[pos] = value
        return out


@dataclass(frozen=True)
class CellTables:
    """
    Cell-level nuisance values.

    Keys are covariate cells (tuples over ``keys``) extended by ``(d,)`` for
    ``eta``, ``(z,)`` for ``p_z`` and ``r_z`` and ``(z, d)`` for ``eta_z``.
    """
    keys: Tuple[str, ...]
    eta: Dict[CellKey, float]
    p: Dict[CellKey, float]
    eta_z: Dict[CellKey, float] = field(default_factory=dict)
    p_z: Dict[CellKey, float] = field(default_factory=dict)
    r_z: Dict[CellKey, float] = field(default_factory=dict)
    z_levels: Tuple[float, ...] = ()

    def perturbed(self, direction: "CellTables", tau: float) -> "CellTables":
        """Tables shifted by ``tau`` times ``direction`` (missing entries count as zero)."""
        def shift(base: Dict[CellKey, float], step: Dict[CellKey, float]) -> Dict[CellKey, float]:
            return {key: value + tau * step.get(key, 0.0) for key, value in base.items()}

        return CellTables(
            keys=self.keys,
            eta=shift(self.eta, direction.eta),
            p=shift(self.p, direction.p),
            eta_z=shift(self.eta_z, direction.eta_z),
            p_z=shift(self.p_z, direction.p_z),
            r_z=shift(self.r_z, direction.r_z),
            z_levels=self.z_levels,
        )

    def to_fit(
        self,
        empty_cell_policy: EmptyCellPolicy = EmptyCellPolicy.ERROR,
        fallback_value: float = 0.0,
        method: str = FirstStageMethod.CELL_MEANS.value,
    ) -> NuisanceFit:
        def table(name: str, values: Dict[CellKey, float]) -> CellTable:
            return CellTable(name, self.keys, values, empty_cell_policy, fallback_value)

        eta = table("E[Y|D,X]", self.eta)
        p = table("P(D=1|X)", self.p)
        metadata = {"cells": len(self.p)}
        if not self.z_levels:
            return NuisanceFit(
                eta=lambda d, rows: eta.lookup(rows, (d,)),
                p=lambda rows: p.lookup(rows),
                method=method,
                metadata=metadata,
            )

        eta_z = table("E[Y|D,X,Z]", self.eta_z)
        p_z = table("P(D=1|X,Z)", self.p_z)
        r_z = table("P(Z|X)", self.r_z)
        return NuisanceFit(
            eta=lambda d, rows: eta.lookup(rows, (d,)),
            p=lambda rows: p.lookup(rows),
            eta_z=lambda d, rows, z: eta_z.lookup(rows, (z, d)),
            p_z=lambda rows, z: p_z.lookup(rows, (z,)),
            r_z=lambda z, rows: r_z.lookup(rows, (z,)),
            z_levels=self.z_levels,
            method=method,
            metadata=metadata,
        )


def _group_means(frame: pd.DataFrame, keys: Sequence[str], values: np.ndarray) -> Dict[CellKey, float]:
    if len(values) == 0:
        return {}
    if not keys:
        return {(): float(np.mean(values))}
    series = pd.Series(values, index=frame.index)
    grouped = series.groupby([frame[k] for k in keys], sort=True).mean()
    return {
        _cell_key(key if isinstance(key, tuple) else (key,)): float(value)
        for key, value in grouped.items()
    }


def _require_discrete(frame: pd.DataFrame, columns: Sequence[str]) -> None:
    for column in columns:
        values = frame[column].to_numpy(dtype=float)
        if not np.all(values == np.round(values)):
            raise ArgumentError(
                "cell means need discrete (integer-coded) conditioning columns",
                module=MODULE, column=column,
            )


def cell_tables(train: Dataset, keys: Optional[Sequence[str]] = None) -> CellTables:
    """Empirical cell means of a training sample."""
    if train.n < 1:
        raise ArgumentError("training sample is empty", module=MODULE)
    if keys is None:
        keys = train.x_cols + ([train.z_col] if train.z_col else [])
    keys = list(keys)
    z_col = train.z_col if train.z_col in keys else None
    x_keys = [k for k in keys if k != z_col]
    _require_discrete(train.frame, keys)

    frame = train.frame
    y = train.y
    d = train.d

    eta: Dict[CellKey, float] = {}
    for arm in (0, 1):
        mask = d == arm
        for cell, value in _group_means(frame[mask], x_keys, y[mask]).items():
            eta[cell + (float(arm),)] = value
    p = _group_means(frame, x_keys, d.astype(float))

    if z_col is None:
        return CellTables(keys=tuple(x_keys), eta=eta, p=p)

    z = train.z
    levels = tuple(float(v) for v in np.unique(z))
    eta_z: Dict[CellKey, float] = {}
    p_z: Dict[CellKey, float] = {}
    r_z: Dict[CellKey, float] = {}
    for level in levels:
        at_level = z == level
        for arm in (0, 1):
            mask = at_level & (d == arm)
            for cell, value in _group_means(frame[mask], x_keys, y[mask]).items():
                eta_z[cell + (level, float(arm))] = value
        for cell, value in _group_means(frame[at_level], x_keys, d[at_level].astype(float)).items():
            p_z[cell + (level,)] = value
        for cell, value in _group_means(frame, x_keys, at_level.astype(float)).items():
            r_z[cell + (level,)] = value

    return CellTables(
        keys=tuple(x_keys), eta=eta, p=p, eta_z=eta_z, p_z=p_z, r_z=r_z, z_levels=levels,
    )


def fit_cell_means(
    train: Dataset,
    keys: Optional[Sequence[str]] = None,
    empty_cell_policy: EmptyCellPolicy = EmptyCellPolicy.ERROR,
    fallback_value: float = 0.0,
) -> NuisanceFit:
    """
    Cell-mean nuisances.

    Args:
        train: Training rows
        keys: Conditioning columns, a subset of the covariates plus the
            instrument; defaults to all of them. Including the instrument
            adds the z-conditional evaluators.
        empty_cell_policy: ``error`` raises on unseen cells, ``zero`` returns
            ``fallback_value``
        fallback_value: Value used by the ``zero`` policy

    Returns:
        NuisanceFit backed by cell tables
    """
    tables = cell_tables(train, keys)
    logger.debug(f"Cell means on {train.n} rows: {len(tables.p)} covariate cells, z levels {tables.z_levels}")
    return tables.to_fit(empty_cell_policy, fallback_value)


# ==================== Polynomial regression ====================

class PolynomialBasis:
    """
    All monomials up to a total degree in standardized covariates.

    Centering and scaling use training moments. Two-valued columns enter
    with power at most one.
    """

    def __init__(self, columns: Sequence[str], degree: int):
        if degree < 0:
            raise ArgumentError(f"polynomial degree must be nonnegative, got {degree}", module=MODULE)
        self.columns = list(columns)
        self.degree = degree
        self.center = np.zeros(len(self.columns))
        self.scale = np.ones(len(self.columns))
        self.terms: List[Tuple[int, ...]] = []
        self.names: List[str] = []

    def fit(self, frame: pd.DataFrame) -> "PolynomialBasis":
        values = frame.loc[:, self.columns].to_numpy(dtype=float)
        binary = []
        for j in range(len(self.columns)):
            column = values[:, j]
            self.center[j] = column.mean()
            std = column.std()
            self.scale[j] = std if std > 0 else 1.0
            binary.append(np.unique(column).size <= 2)

        self.terms = [()]
        self.names = ["1"]
        for total in range(1, self.degree + 1):
            for term in combinations_with_replacement(range(len(self.columns)), total):
                if any(binary[j] and term.count(j) > 1 for j in set(term)):
                    continue
                self.terms.append(term)
                self.names.append(self._name(term))
        return self

    def _name(self, term: Tuple[int, ...]) -> str:
        parts = []
        for j in sorted(set(term)):
            power = term.count(j)
            parts.append(self.columns[j] if power == 1 else f"{self.columns[j]}^{power}")
        return "*".join(parts)

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        values = (frame.loc[:, self.columns].to_numpy(dtype=float) - self.center) / self.scale
        design = np.ones((len(frame), len(self.terms)))
        for i, term in enumerate(self.terms):
            for j in term:
                design[:, i] *= values[:, j]
        return design


def _least_squares(design: np.ndarray, target: np.ndarray, names: Sequence[str], label: str) -> np.ndarray:
    """Column-pivoted QR solve with an explicit rank check."""
    n, p = design.shape
    q, r, pivot = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(n, p) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        collinear = [names[j] for j in pivot[rank:]]
        raise NumericalError(
            f"{label}: design is rank deficient ({rank} of {p} columns); collinear monomials {collinear}",
            module=MODULE,
        )
    solution = linalg.solve_triangular(r[:p, :p], q.T @ target)
    coef = np.empty(p)
    coef[pivot] = solution
    return coef


class OutcomeRegression:
    """Polynomial least-squares fit of y on covariates."""

    def __init__(self, basis: PolynomialBasis, coef: np.ndarray):
        self.basis = basis
        self.coef = coef

    def __call__(self, rows: pd.DataFrame) -> np.ndarray:
        return self.basis.transform(rows) @ self.coef


def fit_outcome_regression(
    train: Dataset,
    d: int,
    degree: int,
    covariates: Optional[Sequence[str]] = None,
    rows: Optional[np.ndarray] = None,
) -> OutcomeRegression:
    """
    Least-squares polynomial regression of y on covariates within arm ``d``.

    Args:
        train: Training rows
        d: Treatment arm (0 or 1)
        degree: Total polynomial degree
        covariates: Columns to expand; defaults to the dataset covariates
        rows: Optional boolean mask further restricting the training rows

    Raises:
        NumericalError: Empty arm or rank-deficient design
    """
    covariates = train.x_cols if covariates is None else list(covariates)
    mask = train.d == d
    if rows is not None:
        mask &= rows
    label = f"E[Y|D={d}] regression"
    if not mask.any():
        raise NumericalError(f"{label}: no training rows in arm D={d}", module=MODULE)

    frame = train.frame[mask]
    basis = PolynomialBasis(covariates, degree).fit(frame)
    coef = _least_squares(basis.transform(frame), train.y[mask], basis.names, label)
    return OutcomeRegression(basis, coef)


# ==================== Logistic regression ====================

class LogisticModel:
    """Logistic regression on a polynomial basis."""

    def __init__(self, basis: PolynomialBasis, coef: np.ndarray, iterations: int):
        self.basis = basis
        self.coef = coef
        self.iterations = iterations

    def __call__(self, rows: pd.DataFrame) -> np.ndarray:
        return expit(self.basis.transform(rows) @ self.coef)


def _log_likelihood(linear: np.ndarray, target: np.ndarray) -> float:
    return float(-np.sum(target * np.logaddexp(0.0, -linear) + (1.0 - target) * np.logaddexp(0.0, linear)))


def fit_logistic(
    frame: pd.DataFrame,
    target: np.ndarray,
    covariates: Sequence[str],
    degree: int,
    label: str = "propensity",
) -> LogisticModel:
    """
    Maximum-likelihood logistic regression by iteratively reweighted least squares.

    The fit is declared separated when the coefficient norm passes
    ``SEPARATION_COEF_NORM`` during iteration, or when a training row ends
    with an absolute linear predictor above ``SEPARATION_LINEAR_PREDICTOR``.
    At 30 the fitted probability is within about 1e-13 of 0 or 1.

    Raises:
        NumericalError: Single-class target, separation or non-convergence
    """
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise NumericalError(f"{label}: no training rows", module=MODULE)
    if target.min() == target.max():
        raise NumericalError(f"{label}: training rows contain a single class", module=MODULE)

    basis = PolynomialBasis(covariates, degree).fit(frame)
    design = basis.transform(frame)
    beta = np.zeros(design.shape[1])
    loglik = _log_likelihood(design @ beta, target)
    advice = "the data look separated; use the cell-means first stage instead"

    for iteration in range(1, IRLS_MAX_ITER + 1):
        linear = design @ beta
        mu = expit(linear)
        weight = np.maximum(mu * (1.0 - mu), 1e-12)
        root = np.sqrt(weight)
        working = root * linear + (target - mu) / root
        new_beta = _least_squares(design * root[:, None], working, basis.names, label)

        if np.linalg.norm(new_beta) > SEPARATION_COEF_NORM:
            raise NumericalError(f"{label}: coefficients diverge; {advice}", module=MODULE)

        new_loglik = _log_likelihood(design @ new_beta, target)
        converged = (
            np.max(np.abs(new_beta - beta)) < IRLS_COEF_TOL
            or abs(new_loglik - loglik) < IRLS_LOGLIK_TOL
        )
        beta, loglik = new_beta, new_loglik
        if converged:
            break
    else:
        raise NumericalError(f"{label}: IRLS did not converge in {IRLS_MAX_ITER} iterations; {advice}", module=MODULE)

    if np.max(np.abs(design @ beta)) > SEPARATION_LINEAR_PREDICTOR:
        raise NumericalError(f"{label}: fitted probabilities reach 0 or 1; {advice}", module=MODULE)

    logger.debug(f"{label}: IRLS converged after {iteration} iterations")
    return LogisticModel(basis, beta, iteration)


def fit_propensity(
    train: Dataset,
    degree: int,
    covariates: Optional[Sequence[str]] = None,
    rows: Optional[np.ndarray] = None,
) -> LogisticModel:
    """
    Logistic propensity score P(D=1|covariates).

    ``covariates`` may include the instrument column.
    """
    covariates = train.x_cols if covariates is None else list(covariates)
    mask = np.ones(train.n, dtype=bool) if rows is None else rows
    return fit_logistic(train.frame[mask], train.d[mask], covariates, degree, "propensity")


def fit_instrument_share(train: Dataset, degree: int) -> Callable[[float, pd.DataFrame], np.ndarray]:
    """P(Z=z|X) by one-vs-rest logistic regressions, normalized across levels."""
    z = train.z
    levels = [float(v) for v in np.unique(z)]
    if len(levels) == 2:
        upper = fit_logistic(train.frame, (z == levels[1]).astype(float), train.x_cols, degree, "instrument share")

        def share(level: float, rows: pd.DataFrame) -> np.ndarray:
            top = upper(rows)
            return top if float(level) == levels[1] else 1.0 - top
        return share

    models = {
        level: fit_logistic(train.frame, (z == level).astype(float), train.x_cols, degree, f"instrument share z={level}")
        for level in levels
    }

    def share(level: float, rows: pd.DataFrame) -> np.ndarray:
        total = sum(model(rows) for model in models.values())
        return models[float(level)](rows) / total
    return share


def fit_polynomial(train: Dataset, config: FirstStageConfig, instrument: bool) -> NuisanceFit:
    """Polynomial outcome regressions plus logistic propensities."""
    degree = config.degree
    p_degree = config.effective_propensity_degree
    eta_models = {arm: fit_outcome_regression(train, arm, degree) for arm in (0, 1)}
    propensity = fit_propensity(train, p_degree)
    metadata = {"degree": degree, "propensity_degree": p_degree, "iterations": propensity.iterations}

    if not instrument:
        return NuisanceFit(
            eta=lambda d, rows: eta_models[d](rows),
            p=propensity,
            method=FirstStageMethod.POLYNOMIAL.value,
            metadata=metadata,
        )

    z = train.z
    levels = tuple(float(v) for v in np.unique(z))
    eta_z_models = {}
    p_z_models = {}
    for level in levels:
        at_level = z == level
        for arm in (0, 1):
            eta_z_models[(level, arm)] = fit_outcome_regression(train, arm, degree, rows=at_level)
        p_z_models[level] = fit_propensity(train, p_degree, rows=at_level)
    share = fit_instrument_share(train, p_degree)

    return NuisanceFit(
        eta=lambda d, rows: eta_models[d](rows),
        p=propensity,
        eta_z=lambda d, rows, z: eta_z_models[(float(z), d)](rows),
        p_z=lambda rows, z: p_z_models[float(z)](rows),
        r_z=share,
        z_levels=levels,
        method=FirstStageMethod.POLYNOMIAL.value,
        metadata=metadata,
    )


# ==================== Dispatch ====================

def fit_nuisances(train: Dataset, config: FirstStageConfig, instrument: Optional[bool] = None) -> NuisanceFit:
    """
    Fit every nuisance a regime may need from ``train`` alone.

    Args:
        train: Training rows
        config: First-stage settings
        instrument: Build z-conditional evaluators; defaults to whether the
            dataset maps an instrument
    """
    if instrument is None:
        instrument = train.z_col is not None
    if instrument and train.z_col is None:
        raise ArgumentError("z-conditional nuisances requested but no instrument column is mapped", module=MODULE)

    if config.method == FirstStageMethod.CELL_MEANS:
        keys = train.x_cols + ([train.z_col] if instrument else [])
        return fit_cell_means(train, keys, config.empty_cell_policy, config.fallback_value)
    return fit_polynomial(train, config, instrument)


def fit_cross_fitted(
    data: Dataset,
    folds: Optional[FoldAssignment],
    config: FirstStageConfig,
    instrument: Optional[bool] = None,
) -> List[NuisanceFit]:
    """
    One fit per fold, each trained on the fold's complement.

    With ``folds`` None a single fit on the full sample is returned.
    """
    if folds is None:
        return [fit_nuisances(data, config, instrument)]

    fits = []
    for fold in range(1, folds.k + 1):
        complement = folds.complement(fold)
        logger.debug(f"Fitting fold {fold}/{folds.k} on {complement.size} complement rows")
        try:
            fits.append(fit_nuisances(data.take(complement), config, instrument))
        except BoundsError as e:
            e.fold = fold
            raise
    return fits


__all__ = [
    'make_folds',
    'NuisanceFit',
    'CellTable',
    'CellTables',
    'cell_tables',
    'fit_cell_means',
    'PolynomialBasis',
    'OutcomeRegression',
    'fit_outcome_regression',
    'LogisticModel',
    'fit_logistic',
    'fit_propensity',
    'fit_instrument_share',
    'fit_polynomial',
    'fit_nuisances',
    'fit_cross_fitted',
]
