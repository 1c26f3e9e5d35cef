"""
Numerical kernels: standard-normal quantiles and Gauss-Legendre quadrature.
"""

import logging
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy.special import ndtri

from .errors import ArgumentError, NumericalError

logger = logging.getLogger(__name__)

MODULE = "numerics"


# ==================== Normal quantile ====================

def inverse_normal_cdf(p: float) -> float:
    """Phi^{-1}(p) for 0 < p < 1."""
    if not 0.0 < p < 1.0:
        raise ArgumentError(f"probability must lie in (0, 1), got {p}", module=MODULE)
    return float(ndtri(p))


def normal_quantile(alpha: float) -> float:
    """
    Two-sided critical value C_alpha with Phi(C) - Phi(-C) = alpha.

    Args:
        alpha: Confidence level in (0, 1)

    Returns:
        The (alpha + 1) / 2 quantile of the standard normal

    Raises:
        ArgumentError: alpha outside (0, 1)
    """
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"confidence level must lie in (0, 1), got {alpha}", module=MODULE)
    return inverse_normal_cdf((alpha + 1.0) / 2.0)


# ==================== Quadrature ====================

@lru_cache(maxsize=8)
def _legendre_rule(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    points, weights = np.polynomial.legendre.leggauss(nodes)
    return points, weights


def gauss_legendre(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, nodes: int = 64) -> float:
    """Fixed-order Gauss-Legendre rule on [a, b]; ``f`` must accept arrays."""
    points, weights = _legendre_rule(nodes)
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    values = np.asarray(f(mid + half * points), dtype=float)
    return float(half * np.dot(weights, values))


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    rel_tol: float = 1e-10,
    nodes: int = 64,
    max_depth: int = 30,
    abs_tol: float = 1e-12,
) -> float:
    """
    Adaptive Gauss-Legendre integration of ``f`` over [a, b].

    The interval is bisected until the two-half estimate agrees with the
    whole-interval estimate to ``rel_tol`` relative to the halves, or to
    ``abs_tol`` when the integral is near zero.

    Raises:
        NumericalError: Tolerance not reached within ``max_depth`` bisections
    """
    if a == b:
        return 0.0

    def refine(lo: float, hi: float, whole: float, depth: int) -> float:
        mid = 0.5 * (lo + hi)
        left = gauss_legendre(f, lo, mid, nodes)
        right = gauss_legendre(f, mid, hi, nodes)
        halves = left + right
        if abs(halves - whole) <= max(rel_tol * abs(halves), abs_tol):
            return halves
        if depth >= max_depth:
            raise NumericalError(
                f"quadrature on [{lo}, {hi}] did not reach tolerance rel={rel_tol} abs={abs_tol}",
                module=MODULE,
            )
        return refine(lo, mid, left, depth + 1) + refine(mid, hi, right, depth + 1)

    return refine(a, b, gauss_legendre(f, a, b, nodes), 0)


__all__ = ['inverse_normal_cdf', 'normal_quantile', 'gauss_legendre', 'integrate']
