"""
Run configuration for the welfare-bounds command line.

A run is described by flat keys that mirror the command-line flags
(``policy_star``, ``k``, ``first_stage``, ...). Keys may come from a YAML or
JSON file and from flags; flags win. The flat mapping is grouped into nested
pydantic models and validated once.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator

from .errors import UsageError
from .models import (
    AdjustmentMode,
    FirstStageConfig,
    IvMode,
    OutcomeSupport,
    SchemaMapping,
    Side,
)

logger = logging.getLogger(__name__)

MODULE = "cli"

COMMANDS = ("estimate", "simulate", "oracle")


# ==================== Configuration models ====================

class InferenceConfig(BaseModel):
    """Cross-fitting and confidence interval settings."""
    k: int = Field(default=2, ge=2, description="Fold count")
    seed: Optional[int] = Field(default=None, description="Seed for every random draw")
    alpha: float = Field(default=0.95, gt=0.0, lt=1.0, description="Confidence level")
    adjustment_mode: AdjustmentMode = Field(default=AdjustmentMode.INSTRUMENT_WEIGHTED)


class MivConfig(BaseModel):
    """Discretization of a monotone instrument."""
    z: Optional[str] = Field(default=None, description="MIV instrument column (defaults to z)")
    bins: int = Field(default=5, ge=2, description="Quantile bin count")
    binning: str = Field(default="quantile", description="quantile or levels")
    cuts: Optional[List[float]] = Field(default=None, description="Interior cut points for 'levels' binning")

    @field_validator("binning")
    @classmethod
    def check_binning(cls, v: str) -> str:
        if v not in ("quantile", "levels"):
            raise ValueError(f"binning must be 'quantile' or 'levels', got {v!r}")
        return v


class SimulationConfig(BaseModel):
    """Monte Carlo and oracle settings."""
    dgp: str = Field(default="builtin")
    ns: List[int] = Field(default_factory=lambda: [100, 1000])
    reps: int = Field(default=500, ge=1)
    variants: Optional[List[str]] = Field(
        default=None, description="estimator:fitting pairs, e.g. debiased:crossfit"
    )
    target_regime: str = Field(default="worst-case")
    target_side: Side = Field(default=Side.LOWER)
    failure_threshold: float = Field(default=0.01, ge=0.0, le=1.0)

    def variant_pairs(self) -> Optional[List[Tuple[str, str]]]:
        if self.variants is None:
            return None
        pairs = []
        for item in self.variants:
            estimator, _, fitting = item.partition(":")
            if not fitting:
                raise ValueError(f"variant {item!r} must look like estimator:fitting")
            pairs.append((estimator, fitting))
        return pairs


class OutputConfig(BaseModel):
    path: Optional[str] = Field(default=None, description="Output file; stdout when absent")
    format: str = Field(default="json", description="json, text or both")

    @field_validator("format")
    @classmethod
    def check_format(cls, v: str) -> str:
        if v not in ("json", "text", "both"):
            raise ValueError(f"format must be json, text or both, got {v!r}")
        return v


class RunConfig(BaseModel):
    """Everything one command needs."""
    command: str
    data: Optional[str] = None
    schema_mapping: Optional[SchemaMapping] = None
    policy_star: Optional[str] = None
    policy: Optional[str] = None
    regimes: List[str] = Field(default_factory=list)
    iv_mode: IvMode = IvMode.BINARY_MONOTONE
    support: Optional[OutcomeSupport] = None
    first_stage: FirstStageConfig = Field(default_factory=FirstStageConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    miv: MivConfig = Field(default_factory=MivConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    threads: int = Field(default=1, ge=1)

    @field_validator("command")
    @classmethod
    def check_command(cls, v: str) -> str:
        if v not in COMMANDS:
            raise ValueError(f"command must be one of {COMMANDS}, got {v!r}")
        return v


# ==================== Flat keys ====================

# flat key -> (section, field); section None means a top-level field
FLAT_KEYS: Dict[str, Tuple[Optional[str], str]] = {
    "data": (None, "data"),
    "policy_star": (None, "policy_star"),
    "policy": (None, "policy"),
    "regime": (None, "regimes"),
    "iv_mode": (None, "iv_mode"),
    "support": (None, "support"),
    "threads": (None, "threads"),
    "y": ("schema_mapping", "y"),
    "d": ("schema_mapping", "d"),
    "x": ("schema_mapping", "x"),
    "z": ("schema_mapping", "z"),
    "first_stage": ("first_stage", "method"),
    "degree": ("first_stage", "degree"),
    "propensity_degree": ("first_stage", "propensity_degree"),
    "empty_cell_policy": ("first_stage", "empty_cell_policy"),
    "fallback_value": ("first_stage", "fallback_value"),
    "k": ("inference", "k"),
    "seed": ("inference", "seed"),
    "alpha": ("inference", "alpha"),
    "adjustment_mode": ("inference", "adjustment_mode"),
    "miv_z": ("miv", "z"),
    "miv_bins": ("miv", "bins"),
    "miv_binning": ("miv", "binning"),
    "miv_cuts": ("miv", "cuts"),
    "dgp": ("simulation", "dgp"),
    "ns": ("simulation", "ns"),
    "reps": ("simulation", "reps"),
    "variants": ("simulation", "variants"),
    "target_regime": ("simulation", "target_regime"),
    "target_side": ("simulation", "target_side"),
    "failure_threshold": ("simulation", "failure_threshold"),
    "output": ("output", "path"),
    "format": ("output", "format"),
}

LIST_KEYS = ("regime", "x", "ns", "variants", "miv_cuts")


def normalize_keys(values: Dict[str, Any], source: str) -> Dict[str, Any]:
    """Map dashed keys to underscores and reject unknown keys."""
    normalized = {}
    for key, value in values.items():
        name = str(key).replace("-", "_")
        if name != "command" and name not in FLAT_KEYS:
            raise UsageError(f"unknown configuration key '{key}' in {source}", module=MODULE)
        if name in LIST_KEYS and value is not None and not isinstance(value, (list, tuple)):
            value = [value]
        normalized[name] = value
    return normalized


def group_flat(values: Dict[str, Any]) -> Dict[str, Any]:
    """Turn flat keys into the nested RunConfig layout."""
    grouped: Dict[str, Any] = {}
    for key, value in values.items():
        if key == "command":
            grouped["command"] = value
            continue
        section, field_name = FLAT_KEYS[key]
        if section is None:
            grouped[field_name] = value
        else:
            grouped.setdefault(section, {})[field_name] = value

    support = grouped.get("support")
    if isinstance(support, (list, tuple)):
        if len(support) != 2:
            raise UsageError(f"support needs two numbers (lower upper), got {support}", module=MODULE)
        grouped["support"] = {"lower": support[0], "upper": support[1]}

    schema = grouped.get("schema_mapping")
    if schema is not None and not {"y", "d"} <= set(schema):
        # Incomplete mappings are reported by the run validator.
        grouped["schema_mapping"] = None
        grouped.setdefault("_partial_schema", schema)
    return grouped


# ==================== Loader ====================

class RunConfigLoader:
    """
    Loads run files and merges them with flags.

    使用示例:
    ```python
    loader = RunConfigLoader("config/example1_estimate.yaml")
    config = loader.build("estimate", {"seed": 7})
    ```
    """

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else None
        self.logger = logging.getLogger(__name__)
        self.file_values: Dict[str, Any] = {}
        if self.config_path is not None:
            self.file_values = self._load_file(self.config_path)
            self.logger.info(f"Loaded run configuration from {self.config_path} ({len(self.file_values)} keys)")

    def _load_file(self, path: Path) -> Dict[str, Any]:
        if not path.exists():
            raise UsageError(f"configuration file not found: {path}", module=MODULE)
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise UsageError(f"cannot parse configuration file {path}: {e}", module=MODULE)
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            raise UsageError(f"configuration file {path} must hold a mapping of keys", module=MODULE)
        return normalize_keys(raw, str(path))

    def merged(self, command: str, flags: Dict[str, Any]) -> Dict[str, Any]:
        """File keys overlaid by every flag that was explicitly given."""
        values = dict(self.file_values)
        values.update(normalize_keys({k: v for k, v in flags.items() if v is not None}, "flags"))
        file_command = values.get("command")
        if file_command is not None and file_command != command:
            raise UsageError(
                f"configuration file is for '{file_command}' but the command is '{command}'", module=MODULE
            )
        values["command"] = command
        return values

    def build(self, command: str, flags: Optional[Dict[str, Any]] = None) -> Tuple[RunConfig, Dict[str, Any]]:
        """
        Validated RunConfig plus the merged flat values.

        Raises:
            UsageError: Unknown keys or values that fail validation
        """
        values = self.merged(command, flags or {})
        grouped = group_flat(values)
        partial = grouped.pop("_partial_schema", None)
        try:
            config = RunConfig.model_validate(grouped)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
            )
            raise UsageError(f"invalid configuration: {problems}", module=MODULE)
        if partial is not None:
            values["_partial_schema"] = partial
        return config, values


def build_run_config(
    command: str,
    flags: Optional[Dict[str, Any]] = None,
    config_path: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Shorthand for ``RunConfigLoader(config_path).build(command, flags)[0]``."""
    return RunConfigLoader(config_path).build(command, flags)[0]


__all__ = [
    'COMMANDS',
    'InferenceConfig',
    'MivConfig',
    'SimulationConfig',
    'OutputConfig',
    'RunConfig',
    'FLAT_KEYS',
    'normalize_keys',
    'group_flat',
    'RunConfigLoader',
    'build_run_config',
]
