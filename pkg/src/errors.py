"""
Error types for the welfare-bounds toolkit.

Every error carries the name of the module that raised it plus optional
location details (row, column, fold) so the command line can report
``"<module>: <message> (row r, column c)"`` and map the error to an exit code.
"""

from typing import Optional


class BoundsError(Exception):
    """Base class for all errors raised by the toolkit."""

    exit_code = 2
    error_type = "error"

    def __init__(
        self,
        message: str,
        *,
        module: str = "bounds",
        row: Optional[int] = None,
        column: Optional[str] = None,
        fold: Optional[int] = None,
    ):
        super().__init__(message)
        self.message = message
        self.module = module
        self.row = row
        self.column = column
        self.fold = fold

    def location(self) -> str:
        """Human readable location suffix, empty when nothing is known."""
        parts = []
        if self.fold is not None:
            parts.append(f"fold {self.fold}")
        if self.row is not None:
            parts.append(f"row {self.row}")
        if self.column is not None:
            parts.append(f"column {self.column}")
        return f" ({', '.join(parts)})" if parts else ""

    def __str__(self) -> str:
        return f"{self.module}: {self.message}{self.location()}"


class UsageError(BoundsError):
    """Invalid or inconsistent command-line flags / configuration keys."""

    exit_code = 1
    error_type = "usage"


class ArgumentError(BoundsError):
    """A library function was called with arguments outside its domain."""

    error_type = "argument"


class SchemaError(BoundsError):
    """A column required by the schema mapping is missing or duplicated."""

    error_type = "schema"


class DomainError(BoundsError):
    """A value violates a declared invariant (support, binary treatment, ...)."""

    error_type = "domain"


class CsvParseError(BoundsError):
    """A cell could not be parsed as a decimal number."""

    error_type = "parse"


class PolicyParseError(BoundsError):
    """A policy expression does not conform to the rule grammar."""

    error_type = "policy-syntax"

    def __init__(self, message: str, *, position: Optional[int] = None, **kwargs):
        kwargs.setdefault("module", "policy")
        super().__init__(message, **kwargs)
        self.position = position

    def location(self) -> str:
        if self.position is None:
            return super().location()
        return f" (position {self.position})"


class NumericalError(BoundsError):
    """Numerical failure: separation, rank deficiency, non-convergence."""

    exit_code = 3
    error_type = "numerical"


class EmptyCellError(NumericalError):
    """A cell-mean evaluator was asked about a cell it never saw in training."""

    error_type = "empty-cell"


__all__ = [
    'BoundsError',
    'UsageError',
    'ArgumentError',
    'SchemaError',
    'DomainError',
    'CsvParseError',
    'PolicyParseError',
    'NumericalError',
    'EmptyCellError',
]
