"""
Tests for the normal quantile and quadrature kernels.
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from src.errors import ArgumentError, NumericalError
from src.numerics import gauss_legendre, integrate, inverse_normal_cdf, normal_quantile


class TestNormalQuantile:
    """C_alpha with Phi(C) - Phi(-C) = alpha"""

    def test_95(self):
        assert normal_quantile(0.95) == pytest.approx(1.959963984540054, abs=1e-12)

    def test_99(self):
        assert normal_quantile(0.99) == pytest.approx(2.5758293035489004, abs=1e-12)

    def test_covers_alpha(self):
        for alpha in (0.5, 0.8, 0.9):
            c = normal_quantile(alpha)
            assert norm.cdf(c) - norm.cdf(-c) == pytest.approx(alpha, abs=1e-12)

    @pytest.mark.parametrize("alpha", [i / 100 for i in range(1, 100)])
    def test_matches_scipy_across_levels(self, alpha):
        assert normal_quantile(alpha) == pytest.approx(norm.ppf((1 + alpha) / 2), abs=1e-9)

    def test_small_alpha_goes_to_zero(self):
        assert normal_quantile(1e-12) == pytest.approx(0.0, abs=1e-11)

    def test_symmetric(self):
        assert inverse_normal_cdf(0.025) == pytest.approx(-inverse_normal_cdf(0.975), abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_probability_bounds(self, p):
        with pytest.raises(ArgumentError):
            inverse_normal_cdf(p)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 1.5])
    def test_outside_unit_interval(self, alpha):
        with pytest.raises(ArgumentError):
            normal_quantile(alpha)


class TestQuadrature:
    """Gauss-Legendre with adaptive bisection"""

    def test_polynomial_exact(self):
        value = gauss_legendre(lambda u: 3 * u ** 2 + 1, 0.0, 2.0, nodes=8)

        assert value == pytest.approx(10.0, rel=1e-14)

    def test_smooth_function(self):
        assert integrate(np.exp, 0.0, 1.0) == pytest.approx(math.e - 1.0, rel=1e-12)

    def test_linear_mean_function(self):
        # mean of a + b*x + c*u over u in [0, p]
        p = 0.45
        value = integrate(lambda u: 5591.0 + 1027.0 * 12 + 2000.0 * u, 0.0, p) / p

        assert value == pytest.approx(5591.0 + 1027.0 * 12 + 1000.0 * p, rel=1e-13)

    def test_zero_integral(self):
        value = integrate(lambda u: np.sin(2 * np.pi * u), 0.0, 1.0)

        assert value == pytest.approx(0.0, abs=1e-10)

    def test_rounding_noise_integrand(self):
        # zero up to rounding at every node, so no subinterval has a relative scale
        value = integrate(lambda u: (u + 1000.0) - 1000.0 - u, 0.0, 1.0)

        assert value == pytest.approx(0.0, abs=1e-10)

    def test_empty_interval(self):
        assert integrate(np.exp, 1.0, 1.0) == 0.0

    def test_tolerance_failure(self):
        with pytest.raises(NumericalError):
            integrate(lambda u: np.sign(u - 0.3141592653589793), 0.0, 1.0, rel_tol=1e-15, nodes=4, max_depth=3)
