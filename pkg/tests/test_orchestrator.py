"""
Tests for BoundsOrchestrator and the command-line entry.

Runs go through ``main.run`` with an argv list, the way the shell calls it.
"""

import json

import pytest
import yaml

from main import run
from src.config_loader import build_run_config
from src.orchestrator import BoundsOrchestrator, canonical_json, load_dgp
from src.errors import UsageError


# ==================== Fixtures ====================

@pytest.fixture
def data_csv(tmp_path, instrument_population):
    """Instrument population expanded to 1080 rows (20 copies of each atom)."""
    path = tmp_path / "data.csv"
    instrument_population.to_dataset(1080).frame.to_csv(path, index=False)
    return path


@pytest.fixture
def estimate_argv(data_csv):
    return [
        "estimate", "--data", str(data_csv), "--y", "y", "--d", "d", "--x", "x", "--z", "z",
        "--policy-star", "x <= 0", "--policy", "x <= 1",
        "--regime", "worst-case", "iv-worst-case",
        "--support", "0", "20", "--k", "2", "--seed", "11", "--quiet",
    ]


def run_json(argv, capsys):
    code = run(argv)
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return json.loads(captured.out), captured.out


# ==================== estimate ====================

class TestEstimateCommand:
    """estimate from a CSV file"""

    def test_payload(self, estimate_argv, capsys):
        payload, _ = run_json(estimate_argv, capsys)

        assert payload["command"] == "estimate"
        assert payload["policy_star"] == "x <= 0"
        assert [est["regime"] for est in payload["estimates"]] == ["worst-case", "iv-worst-case"]
        for est in payload["estimates"]:
            assert est["n"] == 1080
            assert est["seed"] == 11
            assert est["ci_l"][0] <= est["beta_l"] <= est["ci_l"][1]

    def test_worst_case_width(self, estimate_argv, capsys):
        payload, _ = run_json(estimate_argv, capsys)
        wc = payload["estimates"][0]

        # 18 of every 54 rows have x == 1
        assert wc["beta_u"] - wc["beta_l"] == pytest.approx(20.0 * 18 / 54, rel=1e-9)

    def test_reruns_are_identical(self, estimate_argv, capsys):
        _, first = run_json(estimate_argv, capsys)
        _, second = run_json(estimate_argv, capsys)

        assert first == second

    def test_config_file_matches_flags(self, estimate_argv, data_csv, tmp_path, capsys):
        config = {
            "command": "estimate", "data": str(data_csv), "y": "y", "d": "d", "x": ["x"], "z": "z",
            "policy-star": "x <= 0", "policy": "x <= 1", "regime": ["worst-case", "iv-worst-case"],
            "support": [0, 20], "k": 2, "seed": 11,
        }
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(config), encoding="utf-8")

        _, from_flags = run_json(estimate_argv, capsys)
        _, from_file = run_json(["estimate", "--config", str(path), "--quiet"], capsys)

        assert from_flags == from_file

    def test_text_format(self, estimate_argv, capsys):
        assert run(estimate_argv + ["--format", "text"]) == 0

        out = capsys.readouterr().out
        assert out.startswith("Welfare gain bounds")
        assert "iv-worst-case" in out
        assert "seed=11" in out

    def test_output_file(self, estimate_argv, tmp_path, capsys):
        target = tmp_path / "out" / "bounds.json"

        assert run(estimate_argv + ["--output", str(target)]) == 0

        assert capsys.readouterr().out == ""
        assert json.loads(target.read_text(encoding="utf-8"))["command"] == "estimate"

    def test_both_formats(self, estimate_argv, tmp_path):
        target = tmp_path / "bounds.json"

        assert run(estimate_argv + ["--format", "both", "--output", str(target)]) == 0

        assert target.exists()
        assert target.with_suffix(".txt").read_text(encoding="utf-8").startswith("Welfare gain bounds")

    def test_monotonicity_diagnostic(self, estimate_argv, capsys):
        # take-up falls with the instrument in this population
        payload, _ = run_json(estimate_argv, capsys)

        notes = payload["estimates"][1]["diagnostics"]
        assert any(note.startswith("instrument monotonicity violated") for note in notes)


# ==================== Exit codes ====================

class TestExitCodes:
    """Usage 1, domain 2"""

    def test_missing_flags(self, capsys):
        assert run(["estimate", "--quiet"]) == 1
        assert "--data is required for estimate" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert run(["fit"]) == 1
        assert capsys.readouterr().err.startswith("error: ")

    def test_bad_flag_value(self, capsys):
        assert run(["oracle", "--k", "two"]) == 1

    def test_outcome_outside_support(self, estimate_argv, capsys):
        argv = list(estimate_argv)
        argv[argv.index("--support") + 2] = "5"

        assert run(argv) == 2
        assert "outside support" in capsys.readouterr().err

    def test_policy_on_unknown_column(self, estimate_argv, capsys):
        argv = list(estimate_argv)
        argv[argv.index("--policy") + 1] = "age <= 1"

        assert run(argv) == 2

    def test_bad_threads_env(self, monkeypatch, capsys):
        monkeypatch.setenv("BOUNDS_THREADS", "many")

        assert run(["oracle", "--policy-star", "x <= 11", "--policy", "x <= 12"]) == 1


# ==================== oracle / simulate ====================

class TestOracleCommand:
    """Population values of the built-in design"""

    def test_gain(self, capsys):
        payload, _ = run_json(
            ["oracle", "--dgp", "builtin", "--policy-star", "x <= 11", "--policy", "x <= 12", "--regime", "gain", "-q"],
            capsys,
        )

        assert payload["value"] == pytest.approx(1235.82, abs=1e-6)
        assert payload["command"] == "oracle"

    def test_worst_case_text(self, capsys):
        argv = ["oracle", "--policy-star", "x <= 11", "--policy", "x <= 12",
                "--regime", "worst-case", "--format", "text", "-q"]

        assert run(argv) == 0
        assert capsys.readouterr().out.startswith("Population worst-case bounds: [")

    def test_design_file(self, tmp_path, capsys):
        path = tmp_path / "design.yaml"
        path.write_text("support_upper: 200000.0\n", encoding="utf-8")
        argv = ["oracle", "--dgp", str(path), "--policy-star", "x <= 11", "--policy", "x <= 12",
                "--regime", "worst-case", "-q"]

        payload, _ = run_json(argv, capsys)

        assert payload["beta_u"] - payload["beta_l"] == pytest.approx(0.43 * 200000.0, abs=1e-6)

    def test_invalid_design_file(self, tmp_path):
        path = tmp_path / "design.yaml"
        path.write_text("z_prob: 1.5\n", encoding="utf-8")

        with pytest.raises(UsageError, match="invalid design"):
            load_dgp(str(path))

    def test_missing_design_file(self, capsys):
        argv = ["oracle", "--dgp", "nowhere.yaml", "--policy-star", "x <= 11", "--policy", "x <= 12"]

        assert run(argv) == 1


class TestSimulateCommand:
    """A small coverage study end to end"""

    def test_report(self, capsys):
        argv = ["simulate", "--policy-star", "x <= 11", "--policy", "x <= 12", "--seed", "4",
                "--ns", "300", "--reps", "2", "--variants", "debiased:true-nuisance", "-q"]

        payload, _ = run_json(argv, capsys)

        assert payload["command"] == "simulate"
        assert payload["cells"][0]["reps_used"] == 2
        assert payload["target_regime"] == "worst-case"


# ==================== Orchestrator ====================

class TestBoundsOrchestrator:
    """Failures become results, not exceptions"""

    def test_failed_result(self):
        config = build_run_config("oracle", {})

        result = BoundsOrchestrator(config).run()

        assert not result.success
        assert result.exit_code == 1
        assert "total_time" in result.metrics

    def test_metrics_kept_out_of_payload(self):
        config = build_run_config("oracle", {"policy_star": "x <= 11", "policy": "x <= 12"})

        result = BoundsOrchestrator(config).run()

        assert result.success
        assert "total_time" in result.metrics
        assert "total_time" not in result.payload

    def test_canonical_json(self):
        assert canonical_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
