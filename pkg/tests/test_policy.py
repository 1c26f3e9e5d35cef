"""
Tests for policy parsing, evaluation and switch indicators.
"""

import numpy as np
import pandas as pd
import pytest

from src.data_loader import Dataset
from src.errors import ArgumentError, DomainError, PolicyParseError, SchemaError
from src.policy import PolicyPair, parse_policy, policy_indicators, rule_values


def frame(**columns):
    return pd.DataFrame({name: np.asarray(values, dtype=float) for name, values in columns.items()})


# ==================== Parsing ====================

class TestParsePolicy:
    """Grammar: atoms joined by '&', or 'col:binary'"""

    def test_single_atom(self):
        rule = parse_policy("education <= 12")

        assert rule.evaluate(frame(education=[11, 12, 13])).tolist() == [1, 1, 0]

    def test_conjunction(self):
        rule = parse_policy("education <= 15 & prevearn <= 19670")

        result = rule.evaluate(frame(education=[16, 15], prevearn=[1000, 1000]))

        assert result.tolist() == [0, 1]

    @pytest.mark.parametrize("op,expected", [
        ("<", [1, 0, 0]), ("<=", [1, 1, 0]), (">", [0, 0, 1]), (">=", [0, 1, 1]), ("==", [0, 1, 0]),
    ])
    def test_operators(self, op, expected):
        rule = parse_policy(f"x {op} 1")

        assert rule.evaluate(frame(x=[0, 1, 2])).tolist() == expected

    def test_binary_column(self):
        rule = parse_policy("offer:binary")

        assert rule.columns() == ["offer"]
        assert rule.evaluate(frame(offer=[1, 0])).tolist() == [1, 0]

    def test_binary_column_rejects_other_values(self):
        with pytest.raises(DomainError):
            parse_policy("offer:binary").evaluate(frame(offer=[0.5]))

    def test_negative_and_scientific_constants(self):
        rule = parse_policy("a >= -2.5 & b < 1e3")

        assert rule.evaluate(frame(a=[-2.5, -3], b=[999, 0])).tolist() == [1, 0]

    def test_round_trip(self):
        for text in ("education <= 12", "education <= 15 & prevearn <= 19670", "a > -0.5 & b == 3", "z:binary"):
            rule = parse_policy(text)
            assert parse_policy(rule.pretty()) == rule


class TestParseErrors:
    """Malformed expressions report a position"""

    def test_dangling_operator(self):
        with pytest.raises(PolicyParseError) as excinfo:
            parse_policy("education <=")

        assert excinfo.value.position == len("education <=")

    @pytest.mark.parametrize("text", ["x =< 3", "x != 3", "x = 3"])
    def test_unknown_operator(self, text):
        with pytest.raises(PolicyParseError, match="unknown operator"):
            parse_policy(text)

    @pytest.mark.parametrize("text", ["", "   "])
    def test_empty(self, text):
        with pytest.raises(PolicyParseError, match="empty"):
            parse_policy(text)

    def test_missing_conjunction(self):
        with pytest.raises(PolicyParseError) as excinfo:
            parse_policy("x <= 1 y <= 2")

        assert excinfo.value.position == 7

    def test_binary_cannot_combine(self):
        with pytest.raises(PolicyParseError):
            parse_policy("offer:binary & x <= 1")

    def test_error_names_policy_module(self):
        with pytest.raises(PolicyParseError) as excinfo:
            parse_policy("x <")

        assert str(excinfo.value).startswith("policy: ")


# ==================== Indicators ====================

@pytest.fixture
def education_data():
    return Dataset.from_arrays(
        y=[1, 2, 3, 4], d=[0, 1, 0, 1], x={"education": [10, 12, 14, 16]}, support=(0, 10)
    )


class TestPolicyIndicators:
    """theta10 = newly treated, theta01 = newly untreated"""

    def test_identical_policies(self, education_data):
        pair = PolicyPair.parse("education <= 12", "education <= 12")

        indicators = policy_indicators(pair, education_data)

        assert indicators.theta10.sum() == 0
        assert indicators.theta01.sum() == 0
        assert indicators.active.size == 0

    def test_expansion(self, education_data):
        pair = PolicyPair.parse("education <= 11", "education <= 12")

        indicators = policy_indicators(pair, education_data)

        assert indicators.theta10.tolist() == [0, 1, 0, 0]
        assert indicators.theta01.tolist() == [0, 0, 0, 0]

    def test_contraction(self, education_data):
        pair = PolicyPair.parse("education <= 15", "education <= 12")

        indicators = policy_indicators(pair, education_data)

        assert indicators.theta10.tolist() == [0, 0, 0, 0]
        assert indicators.theta01.tolist() == [0, 0, 1, 0]
        assert indicators.difference.tolist() == [0.0, 0.0, -1.0, 0.0]

    def test_indicators_are_disjoint(self, education_data):
        pair = PolicyPair.parse("education >= 12", "education <= 14")

        indicators = policy_indicators(pair, education_data)

        assert np.all(indicators.theta10 * indicators.theta01 == 0)

    def test_unbound_column(self, education_data):
        pair = PolicyPair.parse("age <= 30", "education <= 12")

        with pytest.raises(SchemaError) as excinfo:
            policy_indicators(pair, education_data)

        assert excinfo.value.column == "age"

    def test_describe(self):
        pair = PolicyPair.parse("education <= 11", "education <= 12")

        assert pair.describe() == "from [education <= 11] to [education <= 12]"


class TestRuleValues:
    """Randomized rules for the weighted gain"""

    def test_constant(self):
        assert rule_values(0.5, frame(x=[1, 2])).tolist() == [0.5, 0.5]

    def test_callable(self):
        values = rule_values(lambda f: f["x"] / 4, frame(x=[1, 2]))

        assert values.tolist() == [0.25, 0.5]

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            rule_values(1.5, frame(x=[1]))
