"""
Validators for run configurations and fitted nuisances.

Configuration checks collect every problem before reporting, so a user
sees all missing flags at once. Nuisance checks never fail a run; they
return diagnostics that end up in the output.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config_loader import RunConfig
from .errors import BoundsError, UsageError
from .first_stage import NuisanceFit
from .models import IvMode, Regime, ValidationIssue, ValidationResult
from .simulation import ESTIMATORS, FITTINGS, ORACLE_REGIMES

logger = logging.getLogger(__name__)


# ==================== Run configuration ====================

class RunConfigValidator:
    """
    Checks that a RunConfig carries everything its command needs.

    使用示例:
    ```python
    result = RunConfigValidator().validate(config)
    if not result.is_valid:
        ...
    ```
    """

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def validate(self, config: RunConfig, partial_schema: Optional[Dict[str, Any]] = None) -> ValidationResult:
        errors: List[ValidationIssue] = []
        warnings: List[str] = []

        if config.command == "estimate":
            self._check_estimate(config, partial_schema, errors, warnings)
        elif config.command == "simulate":
            self._check_simulate(config, errors)
        else:
            self._check_oracle(config, errors)

        if config.output.format == "both" and config.output.path is None:
            errors.append(self._issue("format", "missing_output", "--format both needs --output"))

        for issue in errors:
            self.logger.debug(f"Config problem [{issue.field}]: {issue.message}")
        return ValidationResult(is_valid=not errors, errors=errors, warnings=warnings)

    @staticmethod
    def _issue(field: str, error_type: str, message: str) -> ValidationIssue:
        return ValidationIssue(field=field, error_type=error_type, message=message)

    def _require(self, config: RunConfig, names: Sequence[str], errors: List[ValidationIssue]) -> None:
        for name in names:
            if getattr(config, name) is None:
                flag = "--" + name.replace("_", "-")
                errors.append(self._issue(name, "missing", f"{flag} is required for {config.command}"))

    def _check_estimate(
        self,
        config: RunConfig,
        partial_schema: Optional[Dict[str, Any]],
        errors: List[ValidationIssue],
        warnings: List[str],
    ) -> None:
        self._require(config, ("data", "policy_star", "policy", "support"), errors)
        if config.schema_mapping is None:
            given = set(partial_schema or {})
            for name in ("y", "d"):
                if name not in given:
                    errors.append(self._issue(name, "missing", f"--{name} is required for estimate"))

        if not config.regimes:
            errors.append(self._issue("regime", "missing", "at least one --regime is required"))
        regimes = []
        for name in config.regimes:
            try:
                regimes.append(Regime(name))
            except ValueError:
                errors.append(self._issue(
                    "regime", "unknown", f"unknown regime '{name}' (choose from {[r.value for r in Regime]})"
                ))

        z = config.schema_mapping.z if config.schema_mapping else (partial_schema or {}).get("z")
        if any(r.uses_iv for r in regimes):
            if z is None:
                errors.append(self._issue("z", "missing", "IV regimes need --z"))
            if config.iv_mode == IvMode.NONE:
                errors.append(self._issue("iv_mode", "invalid", "IV regimes need --iv-mode binary-monotone or general-discrete"))
        if any(r.uses_miv for r in regimes):
            if z is None and config.miv.z is None:
                errors.append(self._issue("miv_z", "missing", "MIV regimes need --miv-z or --z"))
            if config.miv.binning == "levels" and not config.miv.cuts:
                errors.append(self._issue("miv_cuts", "missing", "--miv-binning levels needs --miv-cuts"))

        if config.inference.seed is None:
            warnings.append("no --seed given; the default fold seed is used")

    def _check_simulate(self, config: RunConfig, errors: List[ValidationIssue]) -> None:
        if config.inference.seed is None:
            errors.append(self._issue("seed", "missing", "--seed is required for simulate"))
        self._require(config, ("policy_star", "policy"), errors)
        if config.simulation.target_regime not in ORACLE_REGIMES[1:]:
            errors.append(self._issue(
                "target_regime", "unknown",
                f"target regime must be one of {list(ORACLE_REGIMES[1:])}, got '{config.simulation.target_regime}'",
            ))
        if not config.simulation.ns or any(n < config.inference.k for n in config.simulation.ns):
            errors.append(self._issue("ns", "invalid", f"every sample size must be at least K={config.inference.k}"))
        try:
            pairs = config.simulation.variant_pairs() or []
        except ValueError as e:
            errors.append(self._issue("variants", "invalid", str(e)))
            pairs = []
        for estimator, fitting in pairs:
            if estimator not in ESTIMATORS or fitting not in FITTINGS:
                errors.append(self._issue(
                    "variants", "unknown",
                    f"unknown variant {estimator}:{fitting} (estimators {ESTIMATORS}, fittings {FITTINGS})",
                ))

    def _check_oracle(self, config: RunConfig, errors: List[ValidationIssue]) -> None:
        self._require(config, ("policy_star", "policy"), errors)
        if len(config.regimes) > 1:
            errors.append(self._issue("regime", "invalid", "oracle takes a single --regime"))
        for name in config.regimes:
            if name not in ORACLE_REGIMES:
                errors.append(self._issue(
                    "regime", "unknown", f"oracle regime must be one of {list(ORACLE_REGIMES)}, got '{name}'"
                ))


def validate_run_config(config: RunConfig, partial_schema: Optional[Dict[str, Any]] = None) -> ValidationResult:
    return RunConfigValidator().validate(config, partial_schema)


def raise_if_invalid(result: ValidationResult) -> None:
    """Raise a UsageError listing every configuration problem."""
    if result.is_valid:
        return
    raise UsageError("; ".join(issue.message for issue in result.errors), module="cli")


# ==================== Nuisance diagnostics ====================

def check_instrument_monotonicity(
    fit: NuisanceFit,
    rows: pd.DataFrame,
    labels: Optional[Sequence[Any]] = None,
    limit: int = 5,
) -> List[str]:
    """
    Flag rows where the fitted take-up falls when the instrument switches on.

    Binary-monotone IV bounds assume P(D=1|X, Z=1) >= P(D=1|X, Z=0).
    """
    if not fit.has_instrument or tuple(fit.z_levels) != (0.0, 1.0) or len(rows) == 0:
        return []
    try:
        gap = fit.p_z(rows, 1.0) - fit.p_z(rows, 0.0)
    except BoundsError as e:
        return [f"instrument monotonicity not checked: {e}"]
    violated = np.flatnonzero(gap < 0)
    if violated.size == 0:
        return []
    labels = list(labels) if labels is not None else list(rows.index)
    shown = ", ".join(str(labels[i]) for i in violated[:limit])
    message = (
        f"instrument monotonicity violated on {violated.size} row(s) (e.g. rows {shown}): "
        f"fitted P(D=1|X,Z=1) < P(D=1|X,Z=0), largest gap {float(-gap.min()):.4f}"
    )
    logger.warning(message)
    return [message]


__all__ = [
    'RunConfigValidator',
    'validate_run_config',
    'raise_if_invalid',
    'check_instrument_monotonicity',
]
