"""
Shared fixtures: small enumerated populations with known bounds.
"""

import itertools

import pytest

from src.identification import PopulationDistribution
from src.models import OutcomeSupport


@pytest.fixture
def support():
    return OutcomeSupport(lower=0.0, upper=20.0)


@pytest.fixture
def two_cell_population(support):
    """
    X in {0, 1} with equal mass and p = 0.5 in both cells.

    x=1: E[Y|D=1]=10, E[Y|D=0]=5; x=0: both arm means 4.
    """
    atoms = [
        {"x": 0.0, "d": 1, "y": 4.0, "prob": 0.25},
        {"x": 0.0, "d": 0, "y": 4.0, "prob": 0.25},
        {"x": 1.0, "d": 1, "y": 10.0, "prob": 0.25},
        {"x": 1.0, "d": 0, "y": 5.0, "prob": 0.25},
    ]
    return PopulationDistribution.from_atoms(atoms, ["x"], support)


def instrument_counts():
    """Atom counts over (x, z, d); every cell is populated."""
    return {
        (x, z, d): 1 + x + 2 * z + 3 * d
        for x, z, d in itertools.product((0, 1, 2), (0, 1), (0, 1))
    }


@pytest.fixture
def instrument_population(support):
    """
    X in {0, 1, 2}, binary Z, one outcome value per (x, z, d) cell; atom
    probabilities are multiples of 1/54.
    """
    counts = instrument_counts()
    total = sum(counts.values())
    atoms = [
        {"x": float(x), "z": float(z), "d": d, "y": float(2 + 3 * x + z + 4 * d), "prob": c / total}
        for (x, z, d), c in counts.items()
    ]
    return PopulationDistribution.from_atoms(atoms, ["x"], support, z_col="z")


@pytest.fixture
def four_cell_population(support):
    """X in {0, 1, 2, 3}, interior nuisances, two outcome values per arm."""
    atoms = []
    shares = {0: 0.3, 1: 0.45, 2: 0.6, 3: 0.7}
    for x, p in shares.items():
        for d, base in ((1, 8.0 + x), (0, 5.0 + 0.5 * x)):
            arm = p if d == 1 else 1.0 - p
            for offset in (-1.0, 1.0):
                atoms.append({"x": float(x), "d": d, "y": base + offset, "prob": 0.25 * arm * 0.5})
    return PopulationDistribution.from_atoms(atoms, ["x"], support)
