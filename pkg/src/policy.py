"""
Treatment-rule parsing and evaluation.

Grammar::

    rule  := atom ('&' atom)*  |  IDENT ':' 'binary'
    atom  := IDENT OP NUMBER
    OP    := '<=' | '<' | '>=' | '>' | '=='

A rule maps a covariate row to 0 or 1. Rules never read the instrument.
"""

import logging
import operator
import re
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ArgumentError, DomainError, PolicyParseError, SchemaError

logger = logging.getLogger(__name__)

MODULE = "policy"

OPERATORS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
    "==": operator.eq,
}

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<op><=|>=|==|<|>)
  | (?P<amp>&)
  | (?P<colon>:)
  | (?P<junk>[=!<>]+|\S)
    """,
    re.VERBOSE,
)


# ==================== Expression tree ====================

@dataclass(frozen=True)
class ThresholdAtom:
    """``column OP value``"""
    column: str
    op: str
    value: float

    def evaluate(self, frame: pd.DataFrame) -> np.ndarray:
        return OPERATORS[self.op](frame[self.column].to_numpy(dtype=float), self.value)

    def pretty(self) -> str:
        return f"{self.column} {self.op} {_format_number(self.value)}"


@dataclass(frozen=True)
class PolicyRule:
    """
    Deterministic treatment rule.

    Either a conjunction of threshold atoms or, when ``binary_column`` is set,
    the value of a 0/1 data column.
    """
    atoms: Tuple[ThresholdAtom, ...] = ()
    binary_column: Optional[str] = None

    def columns(self) -> List[str]:
        if self.binary_column is not None:
            return [self.binary_column]
        return sorted({atom.column for atom in self.atoms})

    def bind(self, columns: Iterable[str]) -> "PolicyRule":
        """Check that every referenced column is available; returns self."""
        available = set(columns)
        unbound = [name for name in self.columns() if name not in available]
        if unbound:
            raise SchemaError(
                f"policy '{self.pretty()}' references unknown covariate(s) {unbound}; "
                f"available: {sorted(available)}",
                module=MODULE, column=unbound[0],
            )
        return self

    def evaluate(self, frame: pd.DataFrame) -> np.ndarray:
        """0/1 treatment assignment for every row of ``frame``."""
        self.bind(frame.columns)
        if self.binary_column is not None:
            values = frame[self.binary_column].to_numpy(dtype=float)
            bad = np.flatnonzero((values != 0.0) & (values != 1.0))
            if bad.size:
                raise DomainError(
                    f"policy column must be 0/1, got {values[bad[0]]!r}",
                    module=MODULE, row=int(frame.index[bad[0]]), column=self.binary_column,
                )
            return values.astype(np.int8)

        result = np.ones(len(frame), dtype=bool)
        for atom in self.atoms:
            result &= atom.evaluate(frame)
        return result.astype(np.int8)

    def pretty(self) -> str:
        if self.binary_column is not None:
            return f"{self.binary_column}:binary"
        return " & ".join(atom.pretty() for atom in self.atoms)

    def __str__(self) -> str:
        return self.pretty()


def _format_number(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


# ==================== Parser ====================

def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    for match in _TOKEN.finditer(text):
        kind = match.lastgroup
        if kind == "ws":
            continue
        if kind == "junk":
            value = match.group()
            if value[0] in "=!<>":
                raise PolicyParseError(f"unknown operator '{value}'", position=match.start())
            raise PolicyParseError(f"unexpected character '{value}'", position=match.start())
        tokens.append((kind, match.group(), match.start()))
    return tokens


def parse_policy(text: str) -> PolicyRule:
    """
    Parse a policy expression.

    Args:
        text: e.g. ``"education <= 15 & prevearn <= 19670"`` or ``"offer:binary"``

    Returns:
        PolicyRule

    Raises:
        PolicyParseError: Empty expression, unknown operator or syntax error
    """
    if text is None or not text.strip():
        raise PolicyParseError("empty policy expression", position=0)

    tokens = _tokenize(text)
    end = len(text)

    def expect(index: int, kind: str, what: str) -> Tuple[str, str, int]:
        if index >= len(tokens):
            raise PolicyParseError(f"expected {what} at end of expression", position=end)
        token = tokens[index]
        if token[0] != kind:
            raise PolicyParseError(f"expected {what}, found '{token[1]}'", position=token[2])
        return token

    if len(tokens) >= 2 and tokens[1][0] == "colon":
        name = expect(0, "ident", "column name")[1]
        flag = expect(2, "ident", "'binary'")
        if flag[1] != "binary":
            raise PolicyParseError(f"expected 'binary' after ':', found '{flag[1]}'", position=flag[2])
        if len(tokens) > 3:
            raise PolicyParseError("binary column rules cannot be combined", position=tokens[3][2])
        return PolicyRule(binary_column=name)

    atoms = []
    index = 0
    while True:
        column = expect(index, "ident", "column name")[1]
        op = expect(index + 1, "op", "comparison operator")[1]
        number = expect(index + 2, "number", "numeric constant")[1]
        atoms.append(ThresholdAtom(column=column, op=op, value=float(number)))
        index += 3
        if index == len(tokens):
            break
        expect(index, "amp", "'&'")
        index += 1

    return PolicyRule(atoms=tuple(atoms))


# ==================== Policy pairs ====================

@dataclass(frozen=True)
class PolicyPair:
    """Benchmark rule ``delta_star`` and the new rule ``delta``."""
    delta_star: PolicyRule
    delta: PolicyRule

    @classmethod
    def parse(cls, delta_star: str, delta: str) -> "PolicyPair":
        return cls(delta_star=parse_policy(delta_star), delta=parse_policy(delta))

    def bind(self, columns: Iterable[str]) -> "PolicyPair":
        columns = list(columns)
        self.delta_star.bind(columns)
        self.delta.bind(columns)
        return self

    def describe(self) -> str:
        return f"from [{self.delta_star.pretty()}] to [{self.delta.pretty()}]"


@dataclass(frozen=True)
class IndicatorVectors:
    """theta10 = 1{delta=1, delta*=0}, theta01 = 1{delta=0, delta*=1}."""
    theta10: np.ndarray
    theta01: np.ndarray

    @property
    def active(self) -> np.ndarray:
        """Positions where either indicator is one."""
        return np.flatnonzero((self.theta10 + self.theta01) > 0)

    @property
    def difference(self) -> np.ndarray:
        return self.theta10.astype(float) - self.theta01.astype(float)


def indicators_from_frame(pair: PolicyPair, frame: pd.DataFrame) -> IndicatorVectors:
    new = pair.delta.evaluate(frame)
    old = pair.delta_star.evaluate(frame)
    theta10 = ((new == 1) & (old == 0)).astype(np.int8)
    theta01 = ((new == 0) & (old == 1)).astype(np.int8)
    return IndicatorVectors(theta10=theta10, theta01=theta01)


def policy_indicators(pair: PolicyPair, data) -> IndicatorVectors:
    """
    Per-row indicators for switching from ``pair.delta_star`` to ``pair.delta``.

    Rules bind against the dataset covariates only.
    """
    pair.bind(data.x_cols)
    indicators = indicators_from_frame(pair, data.frame)
    logger.debug(
        f"Policy {pair.describe()}: {int(indicators.theta10.sum())} newly treated, "
        f"{int(indicators.theta01.sum())} newly untreated"
    )
    return indicators


# ==================== Randomized rules ====================

RuleLike = Union[PolicyRule, float, Callable[[pd.DataFrame], Sequence[float]]]


def rule_values(rule: RuleLike, frame: pd.DataFrame, name: str = "rule") -> np.ndarray:
    """
    Evaluate a deterministic rule, a constant, or a callable returning
    per-row treatment probabilities in [0, 1].
    """
    if isinstance(rule, PolicyRule):
        return rule.evaluate(frame).astype(float)
    if callable(rule):
        values = np.asarray(rule(frame), dtype=float)
    else:
        values = np.full(len(frame), float(rule))
    if values.shape != (len(frame),):
        raise ArgumentError(f"{name} returned shape {values.shape}, expected ({len(frame)},)", module=MODULE)
    if np.any(~np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise ArgumentError(f"{name} values must lie in [0, 1]", module=MODULE)
    return values


__all__ = [
    'OPERATORS',
    'ThresholdAtom',
    'PolicyRule',
    'PolicyPair',
    'IndicatorVectors',
    'parse_policy',
    'policy_indicators',
    'indicators_from_frame',
    'rule_values',
]
