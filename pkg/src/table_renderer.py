"""
Aligned-text tables for estimates, coverage studies and oracle values.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

from .models import BoundsEstimate, CoverageReport, OracleResult


# ==================== Columns ====================

@dataclass
class TableColumn:
    header: str
    width: int
    align: str = "right"

    def cell(self, text: str) -> str:
        return text.rjust(self.width) if self.align == "right" else text.ljust(self.width)


def _number(value: Optional[float], digits: int = 2) -> str:
    if value is None:
        return "-"
    return f"{value:,.{digits}f}"


def _interval(ci, digits: int = 2) -> str:
    if ci is None:
        return ""
    return f"[{_number(ci[0], digits)}, {_number(ci[1], digits)}]"


def render_rows(columns: Sequence[TableColumn], rows: Sequence[Sequence[str]]) -> List[str]:
    """Header, rule and rows; column widths grow to fit the widest cell."""
    widths = [
        max([col.width, len(col.header)] + [len(row[i]) for row in rows])
        for i, col in enumerate(columns)
    ]
    sized = [TableColumn(col.header, width, col.align) for col, width in zip(columns, widths)]
    lines = ["  ".join(col.cell(col.header) for col in sized).rstrip()]
    lines.append("  ".join("-" * col.width for col in sized))
    for row in rows:
        lines.append("  ".join(col.cell(text) for col, text in zip(sized, row)).rstrip())
    return lines


# ==================== Tables ====================

def render_estimates(estimates: Sequence[BoundsEstimate], title: Optional[str] = None) -> str:
    """
    One row per regime with both endpoints; the CI of each endpoint sits
    on the following line in brackets.
    """
    columns = [TableColumn("regime", 14, "left"), TableColumn("lower", 14), TableColumn("upper", 14)]
    rows = []
    for est in estimates:
        rows.append([est.regime.value, _number(est.beta_l), _number(est.beta_u)])
        if est.point_estimate_only:
            rows.append(["", "(no CI)", "(no CI)"])
        else:
            rows.append(["", _interval(est.ci_l), _interval(est.ci_u)])

    lines = []
    if title:
        lines.append(title)
    lines.extend(render_rows(columns, rows))
    if estimates:
        first = estimates[0]
        lines.append(f"n={first.n}  K={first.k}  seed={first.seed}  alpha={first.alpha:g}")
    return "\n".join(lines) + "\n"


def render_coverage(report: CoverageReport) -> str:
    """Blocks per fitting scheme; each row is a sample size."""
    lines = [
        f"Coverage of {report.target_side.value} bound, {report.target_regime.value} "
        f"(target {_number(report.target_value)}, alpha={report.alpha:g}, reps={report.reps}, seed={report.seed})"
    ]
    fittings = list(dict.fromkeys(cell.fitting for cell in report.cells))
    estimators = list(dict.fromkeys(cell.estimator for cell in report.cells))
    ns = list(dict.fromkeys(cell.n for cell in report.cells))

    for fitting in fittings:
        lines.append("")
        lines.append(fitting)
        columns = [TableColumn("n", 6)]
        for estimator in estimators:
            columns.append(TableColumn(f"{estimator} cov", 10))
            columns.append(TableColumn(f"{estimator} len", 12))
        rows = []
        for n in ns:
            row = [str(n)]
            for estimator in estimators:
                try:
                    cell = report.cell(n, estimator, fitting)
                    row.extend([f"{cell.coverage:.3f}", _number(cell.average_length)])
                except KeyError:
                    row.extend(["", ""])
            rows.append(row)
        lines.extend(render_rows(columns, rows))

    failed = {n: count for n, count in report.failed_reps.items() if count}
    if failed:
        lines.append("")
        lines.append("failed replications: " + ", ".join(f"n={n}: {c}" for n, c in failed.items()))
    return "\n".join(lines) + "\n"


def render_oracle(result: OracleResult) -> str:
    if result.value is not None:
        lines = [f"Population welfare gain: {_number(result.value, 4)}"]
    else:
        lines = [
            f"Population {result.regime} bounds: "
            f"[{_number(result.beta_l, 4)}, {_number(result.beta_u, 4)}]"
        ]
    if result.breakdown:
        rows = [[key, _number(value, 4)] for key, value in result.breakdown.items()]
        lines.extend(render_rows([TableColumn("cell", 12, "left"), TableColumn("contribution", 14)], rows))
    return "\n".join(lines) + "\n"


__all__ = [
    'TableColumn',
    'render_rows',
    'render_estimates',
    'render_coverage',
    'render_oracle',
]
