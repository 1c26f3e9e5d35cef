"""
Simulation design, exact population oracle and Monte Carlo coverage harness.

Design: X is discrete with a fixed pmf, Z ~ Bernoulli(z_prob), U ~ U[0, 1],
D = 1{p(X, Z) >= U} with a logistic p, and lognormal potential outcomes whose
mean is linear in (x, u). Conditional means follow from integrating the mean
functions over u on either side of p(x, z).

Random streams: every replication draws from
``PCG64(SeedSequence(seed, spawn_key=(n, rep)))``; its fold shuffle seed comes
from ``SeedSequence(seed, spawn_key=(n, rep, 1))``. Results therefore do not
depend on the number of worker processes.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .data_loader import Dataset
from .errors import ArgumentError, BoundsError, NumericalError
from .first_stage import CellTables, fit_cross_fitted, make_folds
from .identification import cate_bounds
from .inference import cross_fit_estimate, supports_adjustment
from .models import (
    AssumptionSpec,
    CoverageCell,
    CoverageReport,
    FirstStageConfig,
    IvMode,
    OracleResult,
    OutcomeSupport,
    Regime,
    SchemaMapping,
    Side,
)
from .numerics import integrate
from .policy import PolicyPair, indicators_from_frame, policy_indicators

logger = logging.getLogger(__name__)

MODULE = "simulation"

ESTIMATORS = ("original", "debiased")
FITTINGS = ("no-crossfit", "crossfit", "true-nuisance")
DEFAULT_VARIANTS = tuple((e, f) for f in FITTINGS for e in ESTIMATORS)
ORACLE_REGIMES = ("gain", "worst-case", "mtr", "iv-worst-case", "iv-mtr")


# ==================== Design ====================

class DgpSpec(BaseModel):
    """Parameters of the simulation design."""
    x_levels: List[int] = Field(default_factory=lambda: list(range(7, 19)))
    x_pmf: List[float] = Field(
        default_factory=lambda: [0.01, 0.06, 0.07, 0.11, 0.13, 0.43, 0.07, 0.06, 0.02, 0.02, 0.01, 0.01]
    )
    z_prob: float = Field(default=2.0 / 3.0, gt=0.0, lt=1.0)
    propensity_coef: Tuple[float, float, float] = (-4.89, 0.05, 5.0)
    m1_coef: Tuple[float, float, float] = (5591.0, 1027.0, 2000.0)
    m0_coef: Tuple[float, float, float] = (-1127.0, 1389.0, 1000.0)
    sigma1: float = Field(default=11000.0, gt=0.0)
    sigma0: float = Field(default=11000.0, gt=0.0)
    support_lower: float = 0.0
    support_upper: float = 160000.0

    @model_validator(mode="after")
    def check_pmf(self) -> "DgpSpec":
        if len(self.x_levels) != len(self.x_pmf):
            raise ValueError("x_levels and x_pmf must have the same length")
        if any(p < 0 for p in self.x_pmf) or abs(sum(self.x_pmf) - 1.0) > 1e-12:
            raise ValueError(f"x_pmf must be nonnegative and sum to 1, got {sum(self.x_pmf)!r}")
        return self

    @property
    def support(self) -> OutcomeSupport:
        return OutcomeSupport(lower=self.support_lower, upper=self.support_upper)

    def propensity(self, x, z):
        a, b, c = self.propensity_coef
        return 1.0 / (1.0 + np.exp(-(a + b * np.asarray(x, dtype=float) + c * np.asarray(z, dtype=float))))

    def mean_outcome(self, d: int, x, u):
        a, b, c = self.m1_coef if d == 1 else self.m0_coef
        return a + b * np.asarray(x, dtype=float) + c * np.asarray(u, dtype=float)

    def lognormal_params(self, d: int, x, u) -> Tuple[np.ndarray, np.ndarray]:
        """Underlying normal (mu, s) whose lognormal has mean m_d(x, u) and sd sigma_d."""
        m = self.mean_outcome(d, x, u)
        sigma = self.sigma1 if d == 1 else self.sigma0
        mu = np.log(m ** 2 / np.sqrt(sigma ** 2 + m ** 2))
        s = np.sqrt(np.log(sigma ** 2 / m ** 2 + 1.0))
        return mu, s


def replication_stream(seed: int, n: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(n, rep))


def replication_fold_seed(seed: int, n: int, rep: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(n, rep, 1)).generate_state(1)[0])


def dgp_sample(spec: DgpSpec, n: int, seed: Union[int, np.random.SeedSequence]) -> Dataset:
    """
    Draw n observations (y, d, x, z).

    Draw order: x, z, u, then both potential outcomes. Lognormal draws above
    the support are clipped to its upper end.
    """
    if n < 1:
        raise ArgumentError(f"sample size must be positive, got {n}", module=MODULE)
    rng = np.random.Generator(np.random.PCG64(seed))

    x = rng.choice(np.asarray(spec.x_levels, dtype=float), size=n, p=spec.x_pmf)
    z = (rng.random(n) < spec.z_prob).astype(float)
    u = rng.random(n)
    d = (spec.propensity(x, z) >= u).astype(np.int64)

    mu1, s1 = spec.lognormal_params(1, x, u)
    mu0, s0 = spec.lognormal_params(0, x, u)
    y1 = rng.lognormal(mu1, s1)
    y0 = rng.lognormal(mu0, s0)
    y = np.where(d == 1, y1, y0)

    clipped = int(np.sum(y > spec.support_upper))
    if clipped:
        logger.warning(f"Clipped {clipped} simulated outcome(s) to the support upper bound {spec.support_upper}")
        y = np.minimum(y, spec.support_upper)

    frame = pd.DataFrame({"y": y, "d": d, "x": x, "z": z})
    schema = SchemaMapping(y="y", d="d", x=["x"], z="z")
    return Dataset.from_frame(frame, schema, spec.support)


# ==================== Population oracle ====================

@dataclass(frozen=True)
class PopulationCell:
    """Exact first-stage quantities at one covariate level."""
    x: float
    mass: float
    p_z: Dict[float, float]
    eta_z: Dict[Tuple[float, int], float]
    p: float
    eta: Dict[int, float]
    z_given_d: Dict[Tuple[float, int], float]
    cate: float


def population_cells(spec: DgpSpec) -> List[PopulationCell]:
    """
    Conditional means by integrating the mean functions over u.

    E[Y|D=1,X,Z] averages m1 over u <= p(X,Z); E[Y|D=0,X,Z] averages m0 over
    u > p(X,Z). Arm means given X mix these with the Bayes shares P(Z|D,X).

    Raises:
        NumericalError: p(x, z) is 0 or 1 so a conditional mean is undefined
    """
    z_marginal = {1.0: spec.z_prob, 0.0: 1.0 - spec.z_prob}
    cells = []
    for x, mass in zip(spec.x_levels, spec.x_pmf):
        x = float(x)
        p_z: Dict[float, float] = {}
        eta_z: Dict[Tuple[float, int], float] = {}
        for z in (0.0, 1.0):
            p = float(spec.propensity(x, z))
            if not 0.0 < p < 1.0:
                raise NumericalError(
                    f"p(x={x:g}, z={z:g}) = {p} leaves a conditional-mean denominator at zero",
                    module=MODULE,
                )
            p_z[z] = p
            eta_z[(z, 1)] = integrate(lambda u: spec.mean_outcome(1, x, u), 0.0, p) / p
            eta_z[(z, 0)] = integrate(lambda u: spec.mean_outcome(0, x, u), p, 1.0) / (1.0 - p)

        treated = sum(z_marginal[z] * p_z[z] for z in p_z)
        z_given_d = {}
        for z in p_z:
            z_given_d[(z, 1)] = z_marginal[z] * p_z[z] / treated
            z_given_d[(z, 0)] = z_marginal[z] * (1.0 - p_z[z]) / (1.0 - treated)
        eta = {
            arm: sum(eta_z[(z, arm)] * z_given_d[(z, arm)] for z in p_z)
            for arm in (0, 1)
        }
        cate = integrate(lambda u: spec.mean_outcome(1, x, u) - spec.mean_outcome(0, x, u), 0.0, 1.0)
        cells.append(PopulationCell(
            x=x, mass=float(mass), p_z=p_z, eta_z=eta_z, p=treated, eta=eta, z_given_d=z_given_d, cate=cate,
        ))
    return cells


def oracle_tables(spec: DgpSpec) -> CellTables:
    """Exact nuisances as cell tables keyed by x (Z is independent of X)."""
    eta, p, eta_z, p_z, r_z = {}, {}, {}, {}, {}
    z_marginal = {1.0: spec.z_prob, 0.0: 1.0 - spec.z_prob}
    for cell in population_cells(spec):
        key = (cell.x,)
        p[key] = cell.p
        for arm in (0, 1):
            eta[key + (float(arm),)] = cell.eta[arm]
        for z, share in z_marginal.items():
            p_z[key + (z,)] = cell.p_z[z]
            r_z[key + (z,)] = share
            for arm in (0, 1):
                eta_z[key + (z, float(arm))] = cell.eta_z[(z, arm)]
    return CellTables(keys=("x",), eta=eta, p=p, eta_z=eta_z, p_z=p_z, r_z=r_z, z_levels=(0.0, 1.0))


def _oracle_spec(regime: Regime) -> AssumptionSpec:
    mode = IvMode.BINARY_MONOTONE if regime.uses_iv else IvMode.NONE
    return AssumptionSpec(regime=regime, iv_mode=mode)


def population_oracle(spec: DgpSpec, pair: PolicyPair, regime: str = "gain") -> OracleResult:
    """
    Exact welfare gain or population bounds for a policy switch.

    Args:
        spec: Simulation design
        pair: Policies; they may read ``x`` only
        regime: ``gain`` or one of worst-case, mtr, iv-worst-case, iv-mtr

    Returns:
        OracleResult with the value (gain) or both endpoints, plus a
        per-level breakdown
    """
    if regime not in ORACLE_REGIMES:
        raise ArgumentError(f"oracle regime must be one of {ORACLE_REGIMES}, got {regime!r}", module=MODULE)
    pair.bind(["x"])
    cells = population_cells(spec)
    frame = pd.DataFrame({"x": [cell.x for cell in cells]})
    mass = np.array([cell.mass for cell in cells])
    psi = indicators_from_frame(pair, frame).difference

    if regime == "gain":
        cate = np.array([cell.cate for cell in cells])
        breakdown = {f"x={cell.x:g}": cell.mass * cell.cate for cell in cells}
        value = float(np.dot(mass, psi * cate))
        logger.info(f"Population welfare gain {pair.describe()}: {value:.4f}")
        return OracleResult(regime=regime, value=value, breakdown=breakdown)

    assumption = _oracle_spec(Regime(regime))
    fit = oracle_tables(spec).to_fit(method="exact")
    bounds = cate_bounds(assumption, fit, frame, spec.support)
    lower = np.where(psi > 0, bounds.lower, np.where(psi < 0, -bounds.upper, 0.0)) * mass
    upper = np.where(psi > 0, bounds.upper, np.where(psi < 0, -bounds.lower, 0.0)) * mass
    breakdown = {}
    for cell, lo, hi, active in zip(cells, lower, upper, psi != 0):
        if active:
            breakdown[f"x={cell.x:g}:lower"] = float(lo)
            breakdown[f"x={cell.x:g}:upper"] = float(hi)
    result = OracleResult(regime=regime, beta_l=float(lower.sum()), beta_u=float(upper.sum()), breakdown=breakdown)
    logger.info(f"Population {regime} bounds {pair.describe()}: ({result.beta_l:.4f}, {result.beta_u:.4f})")
    return result


# ==================== Monte Carlo ====================

@dataclass(frozen=True)
class ReplicationTask:
    spec: DgpSpec
    pair: PolicyPair
    assumption: AssumptionSpec
    side: Side
    target: float
    n: int
    rep: int
    seed: int
    alpha: float
    k: int
    variants: Tuple[Tuple[str, str], ...]
    first_stage: FirstStageConfig
    true_tables: CellTables


@dataclass(frozen=True)
class ReplicationOutcome:
    n: int
    rep: int
    results: Dict[Tuple[str, str], Tuple[bool, float]]
    error: Optional[str] = None


def run_replication(task: ReplicationTask) -> ReplicationOutcome:
    """One simulated dataset, every requested variant; failures are returned, not raised."""
    try:
        data = dgp_sample(task.spec, task.n, replication_stream(task.seed, task.n, task.rep))
        indicators = policy_indicators(task.pair, data)
        instrument = task.assumption.regime.needs_instrument
        fittings = {fitting for _, fitting in task.variants}
        fitted = {}
        if "crossfit" in fittings:
            folds = make_folds(task.n, task.k, replication_fold_seed(task.seed, task.n, task.rep))
            fitted["crossfit"] = (fit_cross_fitted(data, folds, task.first_stage, instrument), folds)
        if "no-crossfit" in fittings:
            fitted["no-crossfit"] = (fit_cross_fitted(data, None, task.first_stage, instrument), None)
        if "true-nuisance" in fittings:
            fitted["true-nuisance"] = ([task.true_tables.to_fit(method="exact")], None)

        results = {}
        for estimator, fitting in task.variants:
            fits, folds = fitted[fitting]
            estimate = cross_fit_estimate(
                data, indicators, task.assumption, fits, folds,
                alpha=task.alpha, seed=task.seed, adjusted=(estimator == "debiased"),
            )
            low, high = estimate.ci_l if task.side == Side.LOWER else estimate.ci_u
            results[(estimator, fitting)] = (low <= task.target <= high, high - low)
        return ReplicationOutcome(n=task.n, rep=task.rep, results=results)
    except BoundsError as e:
        return ReplicationOutcome(n=task.n, rep=task.rep, results={}, error=str(e))


def monte_carlo(
    spec: DgpSpec,
    pair: PolicyPair,
    target_regime: Regime = Regime.WORST_CASE,
    target_side: Side = Side.LOWER,
    ns: Sequence[int] = (100, 1000),
    reps: int = 500,
    seed: int = 0,
    variants: Optional[Sequence[Tuple[str, str]]] = None,
    alpha: float = 0.95,
    k: int = 2,
    threads: int = 1,
    failure_threshold: float = 0.01,
    first_stage: Optional[FirstStageConfig] = None,
) -> CoverageReport:
    """
    Coverage and average length of CIs for one bound endpoint.

    Args:
        spec: Simulation design
        pair: Policy switch
        target_regime: Regime of the target endpoint (needs an influence adjustment)
        target_side: lower or upper endpoint
        ns: Sample sizes
        reps: Replications per sample size
        seed: Master seed
        variants: (estimator, fitting) pairs; defaults to all six
        alpha: Confidence level
        k: Fold count for the cross-fitted variants
        threads: Worker processes
        failure_threshold: Largest tolerated share of failed replications

    Raises:
        NumericalError: Failed replications exceed the threshold
    """
    target_regime = Regime(target_regime)
    target_side = Side(target_side)
    if target_regime.value not in ORACLE_REGIMES:
        raise ArgumentError(f"{target_regime.value} has no population oracle to cover", module=MODULE)
    assumption = _oracle_spec(target_regime)
    if not supports_adjustment(assumption):
        raise ArgumentError(f"{target_regime.value} has no confidence intervals to study", module=MODULE)
    variants = tuple(tuple(v) for v in (variants or DEFAULT_VARIANTS))
    for estimator, fitting in variants:
        if estimator not in ESTIMATORS or fitting not in FITTINGS:
            raise ArgumentError(f"unknown variant ({estimator}, {fitting})", module=MODULE)
    if reps < 1:
        raise ArgumentError("reps must be positive", module=MODULE)

    oracle = population_oracle(spec, pair, target_regime.value)
    target = oracle.beta_l if target_side == Side.LOWER else oracle.beta_u
    true_tables = oracle_tables(spec)
    first_stage = first_stage or FirstStageConfig()

    tasks = [
        ReplicationTask(
            spec=spec, pair=pair, assumption=assumption, side=target_side, target=target,
            n=n, rep=rep, seed=seed, alpha=alpha, k=k, variants=variants,
            first_stage=first_stage, true_tables=true_tables,
        )
        for n in ns for rep in range(reps)
    ]
    logger.info(f"Monte Carlo: {len(tasks)} replications on {threads} worker(s), target {target:.2f}")
    start = time.time()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_replication, tasks, chunksize=max(1, len(tasks) // (threads * 8))))
    else:
        outcomes = [run_replication(task) for task in tasks]
    logger.info(f"Monte Carlo finished in {time.time() - start:.1f}s")

    cells = []
    failed: Dict[str, int] = {}
    for n in ns:
        outcomes_n = [o for o in outcomes if o.n == n]
        failures = [o for o in outcomes_n if o.error is not None]
        failed[str(n)] = len(failures)
        for outcome in failures[:3]:
            logger.warning(f"n={n}, rep {outcome.rep} failed: {outcome.error}")
        if len(failures) > failure_threshold * reps:
            raise NumericalError(
                f"{len(failures)} of {reps} replications failed at n={n} "
                f"(threshold {failure_threshold:.0%}); first: {failures[0].error}",
                module=MODULE,
            )
        used = [o for o in outcomes_n if o.error is None]
        for estimator, fitting in variants:
            covered = [o.results[(estimator, fitting)][0] for o in used]
            lengths = [o.results[(estimator, fitting)][1] for o in used]
            cells.append(CoverageCell(
                n=n, estimator=estimator, fitting=fitting,
                coverage=float(np.mean(covered)) if covered else 0.0,
                average_length=float(np.mean(lengths)) if lengths else 0.0,
                reps_used=len(used),
            ))

    return CoverageReport(
        target_regime=target_regime, target_side=target_side, target_value=target,
        alpha=alpha, reps=reps, seed=seed, failed_reps=failed, cells=cells,
    )


__all__ = [
    'ESTIMATORS',
    'FITTINGS',
    'DEFAULT_VARIANTS',
    'ORACLE_REGIMES',
    'DgpSpec',
    'replication_stream',
    'replication_fold_seed',
    'dgp_sample',
    'PopulationCell',
    'population_cells',
    'oracle_tables',
    'population_oracle',
    'ReplicationTask',
    'ReplicationOutcome',
    'run_replication',
    'monte_carlo',
]
