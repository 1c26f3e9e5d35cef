"""
Run orchestrator for the welfare-bounds command line.

Coordinates loading, policy parsing, cross-fitting, estimation, simulation
and output for one validated RunConfig, and returns an EstimationResult.
"""

import json
import logging
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from .config_loader import RunConfig
from .data_loader import Dataset, load_dataset
from .errors import ArgumentError, BoundsError, UsageError
from .first_stage import NuisanceFit, fit_cross_fitted, make_folds
from .inference import DEFAULT_SEED, cross_fit_estimate
from .models import (
    SPEC_VERSION,
    AssumptionSpec,
    BoundsEstimate,
    EstimationResult,
    FoldAssignment,
    IvMode,
    Regime,
    SchemaMapping,
)
from .policy import IndicatorVectors, PolicyPair, policy_indicators
from .simulation import DgpSpec, monte_carlo, population_oracle
from .table_renderer import render_coverage, render_estimates, render_oracle
from .validators import check_instrument_monotonicity, raise_if_invalid, validate_run_config

MODULE = "cli"


def canonical_json(payload: Dict[str, Any]) -> str:
    """Stable rendering: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_dgp(name: str) -> DgpSpec:
    """``builtin`` or a YAML/JSON file of DgpSpec overrides."""
    if name == "builtin":
        return DgpSpec()
    path = Path(name)
    if not path.exists():
        raise UsageError(f"--dgp must be 'builtin' or an existing file, got {name!r}", module=MODULE)
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    try:
        return DgpSpec.model_validate(raw)
    except ValidationError as e:
        raise UsageError(f"invalid design in {path}: {e.errors()[0]['msg']}", module=MODULE)


# ==================== Orchestrator ====================

class BoundsOrchestrator:
    """
    Runs one command end to end.

    使用示例:
    ```python
    config, _ = RunConfigLoader("config/example1_estimate.yaml").build("estimate")
    result = BoundsOrchestrator(config).run()
    ```
    """

    def __init__(self, config: RunConfig, partial_schema: Optional[Dict[str, Any]] = None):
        self.config = config
        self.partial_schema = partial_schema
        self.logger = logging.getLogger(__name__)
        self.metrics: Dict[str, Any] = {}

    def run(self) -> EstimationResult:
        """Validate, dispatch, write outputs; errors become a failed result."""
        start_time = time.time()
        command = self.config.command
        self.logger.info(f"Starting {command} run")
        try:
            validation = validate_run_config(self.config, self.partial_schema)
            for warning in validation.warnings:
                self.logger.info(warning)
            raise_if_invalid(validation)

            if command == "estimate":
                result = self.run_estimate()
            elif command == "simulate":
                result = self.run_simulation()
            else:
                result = self.run_oracle()

            result.output_path = self._write_outputs(result)
            self.metrics["total_time"] = time.time() - start_time
            self.metrics["finished_at"] = datetime.now().isoformat()
            result.metrics = dict(self.metrics)
            self.logger.info(f"{command} finished in {self.metrics['total_time']:.2f}s")
            return result

        except BoundsError as e:
            self.logger.error(f"{command} failed: {e}", exc_info=self.logger.isEnabledFor(logging.DEBUG))
            return EstimationResult(
                success=False,
                command=command,
                errors=[str(e)],
                exit_code=e.exit_code,
                metrics={"total_time": time.time() - start_time},
            )

    # ==================== estimate ====================

    def _schema(self) -> SchemaMapping:
        schema = self.config.schema_mapping
        miv_z = self.config.miv.z
        regimes = [Regime(name) for name in self.config.regimes]
        if miv_z and any(r.uses_miv for r in regimes) and miv_z not in schema.columns():
            schema = schema.model_copy(update={"extra": [*schema.extra, miv_z]})
        return schema

    def _pair(self) -> PolicyPair:
        return PolicyPair.parse(self.config.policy_star, self.config.policy)

    def _miv_dataset(self, data: Dataset) -> Tuple[Dataset, List[float], List[float]]:
        """Discretize the monotone instrument and estimate its level shares."""
        column = self.config.miv.z or data.z_col
        values = data.frame[column]
        if self.config.miv.binning == "quantile":
            codes = pd.qcut(values, q=self.config.miv.bins, labels=False, duplicates="drop")
            codes = np.asarray(codes, dtype=float)
        else:
            codes = np.digitize(values.to_numpy(dtype=float), sorted(self.config.miv.cuts)).astype(float)
        levels, counts = np.unique(codes, return_counts=True)
        if levels.size < 2:
            raise ArgumentError(f"MIV instrument '{column}' yields fewer than two levels after binning", module=MODULE)
        weights = (counts / counts.sum()).tolist()
        self.logger.info(
            f"MIV instrument '{column}' binned into {levels.size} levels with shares "
            f"{[round(w, 4) for w in weights]}"
        )
        return data.with_instrument(f"{column}_level", codes), levels.tolist(), weights

    def _assumption(self, regime: Regime, miv: Optional[Tuple[Dataset, List[float], List[float]]]) -> AssumptionSpec:
        if regime.uses_iv:
            return AssumptionSpec(regime=regime, iv_mode=self.config.iv_mode)
        if regime.uses_miv:
            _, levels, weights = miv
            return AssumptionSpec(regime=regime, miv_levels=levels, miv_weights=weights)
        return AssumptionSpec(regime=regime, iv_mode=IvMode.NONE)

    def _monotonicity(self, data: Dataset, fits: List[NuisanceFit], folds: FoldAssignment,
                      indicators: IndicatorVectors) -> List[str]:
        active = np.zeros(data.n, dtype=bool)
        active[indicators.active] = True
        diagnostics = []
        for fold in range(1, folds.k + 1):
            members = folds.members(fold)
            members = members[active[members]]
            rows = data.frame.iloc[members]
            diagnostics.extend(check_instrument_monotonicity(fits[fold - 1], rows))
        return diagnostics

    def run_estimate(self) -> EstimationResult:
        config = self.config

        # ===== Step 1: Load dataset =====
        self.logger.info("Step 1: Loading dataset...")
        step_start = time.time()
        data = load_dataset(config.data, self._schema(), config.support)
        self.metrics["load_time"] = time.time() - step_start
        self.metrics["rows"] = data.n

        # ===== Step 2: Policies =====
        self.logger.info("Step 2: Parsing policies...")
        pair = self._pair()
        indicators = policy_indicators(pair, data)
        self.logger.info(f"Policy switch {pair.describe()}: {indicators.active.size} rows change assignment")

        # ===== Step 3: Fold split =====
        seed = config.inference.seed
        if seed is None:
            seed = DEFAULT_SEED
            self.logger.warning(f"No --seed given; fold split uses the default seed {DEFAULT_SEED}")
        self.logger.info(f"Step 3: Splitting {data.n} rows into {config.inference.k} folds (seed {seed})...")
        folds = make_folds(data.n, config.inference.k, seed)

        # ===== Step 4: Cross-fit and estimate each regime =====
        self.logger.info("Step 4: Estimating bounds...")
        step_start = time.time()
        regimes = [Regime(name) for name in config.regimes]
        miv = self._miv_dataset(data) if any(r.uses_miv for r in regimes) else None
        first_stage = config.first_stage.model_dump(mode="json")
        fit_cache: Dict[str, List[NuisanceFit]] = {}
        estimates: List[BoundsEstimate] = []

        for regime in regimes:
            variant = "miv" if regime.uses_miv else ("iv" if regime.uses_iv else "plain")
            regime_data = miv[0] if variant == "miv" else data
            if variant not in fit_cache:
                self.logger.info(f"Fitting {config.first_stage.method.value} first stage ({variant}) on {folds.k} folds")
                fit_cache[variant] = fit_cross_fitted(regime_data, folds, config.first_stage, instrument=variant != "plain")
            fits = fit_cache[variant]
            spec = self._assumption(regime, miv)

            estimate = cross_fit_estimate(
                regime_data, indicators, spec, fits, folds,
                alpha=config.inference.alpha, seed=seed, first_stage=first_stage,
                mode=config.inference.adjustment_mode,
            )
            if regime.uses_iv and config.iv_mode == IvMode.BINARY_MONOTONE:
                estimate.diagnostics.extend(self._monotonicity(regime_data, fits, folds, indicators))
            self.logger.info(f"{regime.value}: [{estimate.beta_l:.2f}, {estimate.beta_u:.2f}]")
            estimates.append(estimate)
        self.metrics["estimation_time"] = time.time() - step_start

        # ===== Step 5: Assemble outputs =====
        self.logger.info("Step 5: Assembling outputs...")
        payload = {
            "spec_version": SPEC_VERSION,
            "command": "estimate",
            "policy_star": pair.delta_star.pretty(),
            "policy": pair.delta.pretty(),
            "estimates": [est.to_payload() for est in estimates],
        }
        diagnostics = [note for est in estimates for note in est.diagnostics]
        text = render_estimates(estimates, title=f"Welfare gain bounds, {pair.describe()}")
        return EstimationResult(success=True, command="estimate", payload=payload, text=text, diagnostics=diagnostics)

    # ==================== simulate ====================

    def run_simulation(self) -> EstimationResult:
        config = self.config
        sim = config.simulation

        self.logger.info("Step 1: Preparing design...")
        spec = load_dgp(sim.dgp)
        pair = self._pair()

        self.logger.info(f"Step 2: Running {sim.reps} replications for n in {sim.ns}...")
        step_start = time.time()
        report = monte_carlo(
            spec, pair,
            target_regime=Regime(sim.target_regime),
            target_side=sim.target_side,
            ns=sim.ns,
            reps=sim.reps,
            seed=config.inference.seed,
            variants=sim.variant_pairs(),
            alpha=config.inference.alpha,
            k=config.inference.k,
            threads=config.threads,
            failure_threshold=sim.failure_threshold,
            first_stage=config.first_stage,
        )
        self.metrics["simulation_time"] = time.time() - step_start

        self.logger.info("Step 3: Assembling outputs...")
        payload = report.model_dump(mode="json")
        payload.update(command="simulate", policy_star=pair.delta_star.pretty(), policy=pair.delta.pretty())
        diagnostics = [f"n={n}: {count} replication(s) failed" for n, count in report.failed_reps.items() if count]
        return EstimationResult(
            success=True, command="simulate", payload=payload, text=render_coverage(report), diagnostics=diagnostics
        )

    # ==================== oracle ====================

    def run_oracle(self) -> EstimationResult:
        config = self.config
        regime = config.regimes[0] if config.regimes else "gain"
        spec = load_dgp(config.simulation.dgp)
        pair = self._pair()

        self.logger.info(f"Step 1: Evaluating population {regime}...")
        result = population_oracle(spec, pair, regime)
        payload = result.model_dump(mode="json")
        payload.update(command="oracle", policy_star=pair.delta_star.pretty(), policy=pair.delta.pretty())
        return EstimationResult(success=True, command="oracle", payload=payload, text=render_oracle(result))

    # ==================== Output ====================

    def _write_outputs(self, result: EstimationResult) -> Optional[str]:
        """Write to --output when given; returns the primary path."""
        output = self.config.output
        if output.path is None:
            return None
        path = Path(output.path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if output.format == "text":
            path.write_text(result.text, encoding="utf-8")
        else:
            path.write_text(canonical_json(result.payload), encoding="utf-8")
        if output.format == "both":
            path.with_suffix(".txt").write_text(result.text, encoding="utf-8")
        self.logger.info(f"Output written to {path}")
        return str(path)


__all__ = ['canonical_json', 'load_dgp', 'BoundsOrchestrator']
