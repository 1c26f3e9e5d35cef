"""
Tests for folds, cell means, polynomial regression and logistic IRLS.
"""

import numpy as np
import pandas as pd
import pytest

import src.first_stage as first_stage
from src.data_loader import Dataset
from src.errors import ArgumentError, EmptyCellError, NumericalError
from src.first_stage import (
    fit_cell_means,
    fit_cross_fitted,
    fit_nuisances,
    fit_outcome_regression,
    fit_propensity,
    make_folds,
)
from src.models import EmptyCellPolicy, FirstStageConfig, FirstStageMethod
from src.simulation import DgpSpec, dgp_sample


def rows(**columns):
    return pd.DataFrame({name: np.asarray(values, dtype=float) for name, values in columns.items()})


# ==================== Folds ====================

class TestMakeFolds:
    """Balanced, seeded partitions"""

    def test_even_split(self):
        folds = make_folds(4, 2, seed=11)

        assert sorted(folds.fold_of) == [1, 1, 2, 2]
        union = sorted(np.concatenate([folds.members(1), folds.members(2)]).tolist())
        assert union == [0, 1, 2, 3]

    def test_uneven_split(self):
        folds = make_folds(5, 2, seed=11)

        assert sorted([folds.members(1).size, folds.members(2).size]) == [2, 3]

    def test_deterministic(self):
        assert make_folds(50, 5, seed=3).fold_of == make_folds(50, 5, seed=3).fold_of

    def test_seed_changes_split(self):
        assert make_folds(50, 2, seed=3).fold_of != make_folds(50, 2, seed=4).fold_of

    def test_complement(self):
        folds = make_folds(9, 3, seed=0)

        for fold in (1, 2, 3):
            assert set(folds.complement(fold)) == set(range(9)) - set(folds.members(fold))

    @pytest.mark.parametrize("n,k", [(4, 5), (4, 1), (4, 0)])
    def test_invalid_fold_count(self, n, k):
        with pytest.raises(ArgumentError):
            make_folds(n, k, seed=1)


# ==================== Cell means ====================

@pytest.fixture
def tiny():
    return Dataset.from_arrays(y=[1, 3, 2], d=[1, 1, 0], x={"x": [0, 0, 0]}, support=(0, 10))


class TestCellMeans:
    """Empirical averages per covariate cell"""

    def test_direct_averages(self, tiny):
        fit = fit_cell_means(tiny)
        cell = rows(x=[0])

        assert fit.eta(1, cell)[0] == pytest.approx(2.0)
        assert fit.eta(0, cell)[0] == pytest.approx(2.0)
        assert fit.p(cell)[0] == pytest.approx(2.0 / 3.0)
        assert not fit.has_instrument

    def test_unseen_cell_errors(self, tiny):
        fit = fit_cell_means(tiny)

        with pytest.raises(EmptyCellError) as excinfo:
            fit.eta(1, rows(x=[0, 5]))

        assert excinfo.value.row == 1
        assert excinfo.value.exit_code == 3

    def test_unseen_cell_fallback(self, tiny):
        fit = fit_cell_means(tiny, empty_cell_policy=EmptyCellPolicy.ZERO)

        assert fit.eta(1, rows(x=[5]))[0] == 0.0

    def test_empty_arm_in_seen_cell(self):
        data = Dataset.from_arrays(y=[1, 2], d=[1, 1], x={"x": [0, 0]}, support=(0, 10))
        fit = fit_cell_means(data)

        assert fit.p(rows(x=[0]))[0] == 1.0
        with pytest.raises(EmptyCellError):
            fit.eta(0, rows(x=[0]))

    def test_instrument_tables(self):
        data = Dataset.from_arrays(
            y=[1, 3, 5, 7, 2, 4],
            d=[1, 0, 1, 0, 1, 0],
            x={"x": [0, 0, 0, 0, 0, 0]},
            z=[1, 1, 1, 0, 0, 0],
            support=(0, 10),
        )

        fit = fit_cell_means(data)
        cell = rows(x=[0])

        assert fit.z_levels == (0.0, 1.0)
        assert fit.eta_z(1, cell, 1.0)[0] == pytest.approx(3.0)
        assert fit.eta_z(0, cell, 0.0)[0] == pytest.approx(5.5)
        assert fit.p_z(cell, 1.0)[0] == pytest.approx(2.0 / 3.0)
        assert fit.r_z(0.0, cell)[0] == pytest.approx(0.5)

    def test_non_discrete_key(self):
        data = Dataset.from_arrays(y=[1, 2], d=[1, 0], x={"x": [0.5, 1.0]}, support=(0, 10))

        with pytest.raises(ArgumentError):
            fit_cell_means(data)

    def test_saturated_binary_matches_linear_regression(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 2, size=200)
        d = rng.integers(0, 2, size=200)
        y = rng.uniform(0, 10, size=200)
        data = Dataset.from_arrays(y=y, d=d, x={"x": x}, support=(0, 10))
        grid = rows(x=[0, 1])

        cells = fit_cell_means(data)
        for arm in (0, 1):
            regression = fit_outcome_regression(data, arm, degree=1)
            np.testing.assert_allclose(regression(grid), cells.eta(arm, grid), atol=1e-10)


# ==================== Polynomial regression ====================

class TestOutcomeRegression:
    """Least squares by pivoted QR"""

    def test_interpolates_linear_data(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 5.0])
        data = Dataset.from_arrays(y=2 + 3 * x, d=np.ones(5, dtype=int), x={"x": x}, support=(0, 50))

        model = fit_outcome_regression(data, 1, degree=1)

        np.testing.assert_allclose(model(rows(x=[0.0, 4.0])), [2.0, 14.0], atol=1e-10)

    def test_quadratic_two_covariates(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, 40)
        b = rng.uniform(0, 3, 40)
        y = 5 + a - 0.5 * b + 0.25 * a * b + b ** 2
        data = Dataset.from_arrays(y=y, d=np.zeros(40, dtype=int), x={"a": a, "b": b}, support=(0, 50))

        model = fit_outcome_regression(data, 0, degree=2)

        np.testing.assert_allclose(model(data.frame), y, atol=1e-9)

    def test_rank_deficient(self):
        data = Dataset.from_arrays(y=[1, 2, 4], d=[1, 1, 1], x={"x": [0, 1, 2], "w": [0, 1, 2]}, support=(0, 10))

        with pytest.raises(NumericalError, match="rank deficient"):
            fit_outcome_regression(data, 1, degree=1)

    def test_duplicated_binary_columns(self):
        data = Dataset.from_arrays(
            y=[1, 2, 1, 2], d=[1, 1, 1, 1], x={"x": [0, 1, 0, 1], "v": [0, 1, 0, 1]}, support=(0, 10)
        )

        with pytest.raises(NumericalError, match="collinear"):
            fit_outcome_regression(data, 1, degree=2)

    def test_empty_arm(self):
        data = Dataset.from_arrays(y=[1, 2], d=[1, 1], x={"x": [0, 1]}, support=(0, 10))

        with pytest.raises(NumericalError, match="no training rows"):
            fit_outcome_regression(data, 0, degree=1)


# ==================== Logistic IRLS ====================

class TestPropensity:
    """Logistic maximum likelihood"""

    def test_intercept_only_recovers_share(self):
        d = np.array([1] * 3 + [0] * 7)
        data = Dataset.from_arrays(y=np.ones(10), d=d, x={"x": np.arange(10)}, support=(0, 10))

        model = fit_propensity(data, degree=0)

        np.testing.assert_allclose(model(data.frame), 0.3, atol=1e-6)

    def test_separation(self):
        x = np.array([-2.0, -1.0, 1.0, 2.0] * 5)
        data = Dataset.from_arrays(y=np.ones(20), d=(x > 0).astype(int), x={"x": x}, support=(0, 10))

        with pytest.raises(NumericalError, match="cell-means"):
            fit_propensity(data, degree=1)

    def test_extreme_linear_predictor(self, monkeypatch):
        d = np.array([1] * 3 + [0] * 7)
        data = Dataset.from_arrays(y=np.ones(10), d=d, x={"x": np.arange(10)}, support=(0, 10))
        monkeypatch.setattr(first_stage, "SEPARATION_LINEAR_PREDICTOR", 0.5)

        # logit(0.3) is about -0.85
        with pytest.raises(NumericalError, match="reach 0 or 1"):
            fit_propensity(data, degree=0)

    def test_single_class(self):
        data = Dataset.from_arrays(y=[1, 2], d=[1, 1], x={"x": [0, 1]}, support=(0, 10))

        with pytest.raises(NumericalError, match="single class"):
            fit_propensity(data, degree=1)

    def test_recovers_design_propensity(self):
        data = dgp_sample(DgpSpec(), 10000, seed=2024)
        config = FirstStageConfig(method=FirstStageMethod.POLYNOMIAL, degree=2, propensity_degree=1)

        fit = fit_nuisances(data, config, instrument=True)

        assert fit.p_z(rows(x=[12.0]), 1.0)[0] == pytest.approx(0.6704, abs=0.03)
        assert fit.p_z(rows(x=[12.0]), 0.0)[0] == pytest.approx(0.0135, abs=0.01)


# ==================== Cross-fitting ====================

class TestCrossFitting:
    """Each fold's fit sees only its complement"""

    @pytest.fixture
    def sample(self):
        rng = np.random.default_rng(9)
        n = 60
        return Dataset.from_arrays(
            y=rng.uniform(0, 10, n), d=rng.integers(0, 2, n), x={"x": rng.integers(0, 3, n)}, support=(0, 10)
        )

    def test_one_fit_per_fold(self, sample):
        folds = make_folds(sample.n, 3, seed=1)

        fits = fit_cross_fitted(sample, folds, FirstStageConfig())

        assert len(fits) == 3

    def test_held_out_rows_do_not_matter(self, sample):
        folds = make_folds(sample.n, 2, seed=1)
        frame = sample.frame.copy()
        held_out = folds.members(1)
        frame.iloc[held_out, frame.columns.get_loc("y")] = 9.5
        changed = Dataset.from_frame(frame, sample.schema, sample.support)
        grid = rows(x=[0, 1, 2])

        original = fit_cross_fitted(sample, folds, FirstStageConfig())[0]
        perturbed = fit_cross_fitted(changed, folds, FirstStageConfig())[0]

        for arm in (0, 1):
            np.testing.assert_array_equal(original.eta(arm, grid), perturbed.eta(arm, grid))
        np.testing.assert_array_equal(original.p(grid), perturbed.p(grid))

    def test_fit_is_pure_function_of_training_rows(self, sample):
        grid = rows(x=[0, 1, 2])

        first = fit_nuisances(sample, FirstStageConfig())
        second = fit_nuisances(sample, FirstStageConfig())

        np.testing.assert_array_equal(first.eta(1, grid), second.eta(1, grid))

    def test_fold_index_on_failure(self):
        data = Dataset.from_arrays(y=np.ones(6), d=[1, 1, 1, 1, 1, 0], x={"x": np.arange(6)}, support=(0, 10))
        folds = make_folds(6, 2, seed=0)
        config = FirstStageConfig(method=FirstStageMethod.POLYNOMIAL, degree=1)

        with pytest.raises(NumericalError) as excinfo:
            fit_cross_fitted(data, folds, config)

        assert excinfo.value.fold in (1, 2)

    def test_instrument_without_column(self, sample):
        with pytest.raises(ArgumentError):
            fit_nuisances(sample, FirstStageConfig(), instrument=True)
