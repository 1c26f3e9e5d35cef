"""
Tests for the aligned-text tables.
"""

from src.models import BoundsEstimate, CoverageCell, CoverageReport, OracleResult, Regime, Side
from src.table_renderer import TableColumn, render_coverage, render_estimates, render_oracle, render_rows


def make_estimate(regime, **overrides):
    values = dict(
        regime=regime, beta_l=-31423.0, beta_u=36928.0, omega_l=1.0, omega_u=1.0,
        ci_l=(-32564.0, -30282.0), ci_u=(35800.0, 38056.0), alpha=0.95, n=9223, k=2, seed=1,
    )
    values.update(overrides)
    return BoundsEstimate(**values)


class TestRenderRows:
    """Column sizing"""

    def test_widths_grow_to_fit(self):
        lines = render_rows([TableColumn("a", 2, "left"), TableColumn("b", 3)], [["long cell", "1"]])

        assert lines[0] == "a".ljust(9) + "    b"
        assert lines[1] == "---------  ---"
        assert lines[2] == "long cell    1"


class TestRenderEstimates:
    """One row per regime, CIs below"""

    def test_layout(self):
        text = render_estimates([make_estimate(Regime.WORST_CASE)], title="Welfare gain bounds")
        lines = text.splitlines()

        assert lines[0] == "Welfare gain bounds"
        assert lines[3].split()[:3] == ["worst-case", "-31,423.00", "36,928.00"]
        assert "[-32,564.00, -30,282.00]" in lines[4]
        assert lines[-1] == "n=9223  K=2  seed=1  alpha=0.95"

    def test_point_estimate_only(self):
        est = make_estimate(
            Regime.MIV_WORST_CASE, omega_l=None, omega_u=None, ci_l=None, ci_u=None, point_estimate_only=True
        )

        assert "(no CI)" in render_estimates([est])

    def test_empty(self):
        assert render_estimates([]).count("\n") == 2


class TestRenderCoverage:
    """Blocks per fitting scheme"""

    def test_blocks(self):
        report = CoverageReport(
            target_regime=Regime.WORST_CASE, target_side=Side.LOWER, target_value=-31269.0,
            alpha=0.95, reps=500, seed=1, failed_reps={"100": 3, "1000": 0},
            cells=[
                CoverageCell(n=100, estimator="debiased", fitting="crossfit", coverage=0.948, average_length=21000.0, reps_used=497),
                CoverageCell(n=1000, estimator="debiased", fitting="crossfit", coverage=0.952, average_length=6797.0, reps_used=500),
                CoverageCell(n=1000, estimator="original", fitting="true-nuisance", coverage=0.95, average_length=4454.0, reps_used=500),
            ],
        )

        text = render_coverage(report)

        assert text.startswith("Coverage of lower bound, worst-case")
        assert "\ncrossfit\n" in text
        assert "\ntrue-nuisance\n" in text
        assert "6,797.00" in text
        assert "failed replications: n=100: 3" in text
        assert "n=1000: 0" not in text


class TestRenderOracle:
    """Gain or bounds with a per-cell breakdown"""

    def test_gain(self):
        text = render_oracle(OracleResult(regime="gain", value=1235.82, breakdown={"x=12": 1235.82}))

        assert text.startswith("Population welfare gain: 1,235.8200")
        assert "x=12" in text

    def test_bounds(self):
        text = render_oracle(OracleResult(regime="worst-case", beta_l=-31269.0, beta_u=37530.7))

        assert text == "Population worst-case bounds: [-31,269.0000, 37,530.7000]\n"
