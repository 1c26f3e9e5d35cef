"""
Tests for run-configuration checks and nuisance diagnostics.
"""

import pandas as pd
import pytest

from src.config_loader import RunConfigLoader, build_run_config
from src.errors import UsageError
from src.first_stage import CellTables
from src.validators import (
    RunConfigValidator,
    check_instrument_monotonicity,
    raise_if_invalid,
    validate_run_config,
)


@pytest.fixture
def estimate_flags():
    return {
        "data": "data.csv",
        "y": "y",
        "d": "d",
        "x": ["x"],
        "z": "z",
        "policy_star": "x <= 0",
        "policy": "x <= 1",
        "regime": ["worst-case", "iv-worst-case"],
        "support": [0, 20],
        "seed": 1,
    }


def messages(result):
    return [issue.message for issue in result.errors]


# ==================== estimate ====================

class TestEstimateChecks:
    """Flags an estimate run needs"""

    def test_complete(self, estimate_flags):
        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert result.is_valid
        assert result.warnings == []

    def test_every_missing_flag_reported(self):
        config, values = RunConfigLoader().build("estimate", {"x": ["x"]})

        result = RunConfigValidator().validate(config, values.get("_partial_schema"))

        found = messages(result)
        for flag in ("--data", "--policy-star", "--policy", "--support", "--y", "--d"):
            assert any(m.startswith(flag + " ") for m in found), flag
        assert "at least one --regime is required" in found

    def test_unknown_regime(self, estimate_flags):
        estimate_flags["regime"] = ["best-case"]

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert "unknown regime 'best-case'" in messages(result)[0]

    def test_iv_needs_instrument(self, estimate_flags):
        del estimate_flags["z"]

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert "IV regimes need --z" in messages(result)

    def test_iv_needs_mode(self, estimate_flags):
        estimate_flags["iv_mode"] = "none"

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert not result.is_valid
        assert result.errors[0].field == "iv_mode"

    def test_miv_level_binning_needs_cuts(self, estimate_flags):
        estimate_flags.update(regime=["miv-worst-case"], miv_binning="levels")

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert "--miv-binning levels needs --miv-cuts" in messages(result)

    def test_miv_instrument_from_miv_z(self, estimate_flags):
        del estimate_flags["z"]
        estimate_flags.update(regime=["miv-mtr"], miv_z="age")

        assert validate_run_config(build_run_config("estimate", estimate_flags)).is_valid

    def test_missing_seed_is_a_warning(self, estimate_flags):
        del estimate_flags["seed"]

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert result.is_valid
        assert "--seed" in result.warnings[0]

    def test_both_formats_need_path(self, estimate_flags):
        estimate_flags["format"] = "both"

        result = validate_run_config(build_run_config("estimate", estimate_flags))

        assert "--format both needs --output" in messages(result)


# ==================== simulate / oracle ====================

class TestSimulateChecks:
    """Flags a coverage study needs"""

    @pytest.fixture
    def flags(self):
        return {"policy_star": "x <= 11", "policy": "x <= 12", "seed": 3}

    def test_complete(self, flags):
        assert validate_run_config(build_run_config("simulate", flags)).is_valid

    def test_seed_required(self, flags):
        del flags["seed"]

        result = validate_run_config(build_run_config("simulate", flags))

        assert "--seed is required for simulate" in messages(result)

    def test_target_regime(self, flags):
        flags["target_regime"] = "gain"

        assert not validate_run_config(build_run_config("simulate", flags)).is_valid

    def test_sample_size_below_fold_count(self, flags):
        flags.update(ns=[100, 3], k=5)

        result = validate_run_config(build_run_config("simulate", flags))

        assert result.errors[0].field == "ns"

    @pytest.mark.parametrize("variant", ["debiased", "robust:crossfit", "debiased:bootstrap"])
    def test_bad_variants(self, flags, variant):
        flags["variants"] = [variant]

        result = validate_run_config(build_run_config("simulate", flags))

        assert result.errors[0].field == "variants"


class TestOracleChecks:
    """Flags an oracle run needs"""

    def test_complete(self):
        config = build_run_config("oracle", {"policy_star": "x <= 11", "policy": "x <= 12", "regime": ["gain"]})

        assert validate_run_config(config).is_valid

    def test_single_regime(self):
        config = build_run_config(
            "oracle", {"policy_star": "x <= 11", "policy": "x <= 12", "regime": ["gain", "mtr"]}
        )

        assert "oracle takes a single --regime" in messages(validate_run_config(config))

    def test_miv_has_no_oracle(self):
        config = build_run_config(
            "oracle", {"policy_star": "x <= 11", "policy": "x <= 12", "regime": ["miv-mtr"]}
        )

        assert not validate_run_config(config).is_valid


class TestRaiseIfInvalid:
    """Usage errors carry every message"""

    def test_joins_messages(self):
        result = validate_run_config(build_run_config("oracle", {}))

        with pytest.raises(UsageError) as excinfo:
            raise_if_invalid(result)

        assert "--policy-star is required for oracle" in str(excinfo.value)
        assert "--policy is required for oracle" in str(excinfo.value)
        assert str(excinfo.value).startswith("cli: ")

    def test_valid_passes(self):
        config = build_run_config("oracle", {"policy_star": "x <= 11", "policy": "x <= 12"})

        raise_if_invalid(validate_run_config(config))


# ==================== Nuisance diagnostics ====================

def instrument_fit(p_z):
    return CellTables(
        keys=("x",), eta={}, p={}, eta_z={}, p_z=p_z, z_levels=(0.0, 1.0),
    ).to_fit()


class TestInstrumentMonotonicity:
    """Fitted take-up should not fall when Z switches on"""

    def test_monotone(self):
        fit = instrument_fit({(0.0, 0.0): 0.1, (0.0, 1.0): 0.6})

        assert check_instrument_monotonicity(fit, pd.DataFrame({"x": [0.0, 0.0]})) == []

    def test_violation_names_rows(self):
        fit = instrument_fit({(0.0, 0.0): 0.1, (0.0, 1.0): 0.6, (1.0, 0.0): 0.5, (1.0, 1.0): 0.2})
        rows = pd.DataFrame({"x": [0.0, 1.0, 1.0]}, index=[10, 11, 12])

        found = check_instrument_monotonicity(fit, rows)

        assert found[0].startswith("instrument monotonicity violated on 2 row(s)")
        assert "rows 11, 12" in found[0]

    def test_unseen_cell_is_reported(self):
        fit = instrument_fit({(0.0, 0.0): 0.1, (0.0, 1.0): 0.6})

        found = check_instrument_monotonicity(fit, pd.DataFrame({"x": [3.0]}))

        assert found[0].startswith("instrument monotonicity not checked")

    def test_without_instrument(self):
        fit = CellTables(keys=("x",), eta={}, p={(0.0,): 0.5}).to_fit()

        assert check_instrument_monotonicity(fit, pd.DataFrame({"x": [0.0]})) == []
