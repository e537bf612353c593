"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from idbohm.core import SpeciesSlot, SpeciesTable, uniform_species
from idbohm.wavefunction import (
    GaussianProductState,
    WaveFunction,
    exchange_symmetrize,
    product_state,
)

ELECTRON_MUON_MASS_RATIO = 206.8


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)


@pytest.fixture
def electron_muon():
    return SpeciesTable((SpeciesSlot(1.0, tag="electron"),
                         SpeciesSlot(ELECTRON_MUON_MASS_RATIO, tag="muon")))


@pytest.fixture
def overlap_psi(electron_muon):
    """Overlapping light/heavy packets; centers 0.8 widths apart."""
    state = product_state([[0.0], [0.8]], [1.0, 1.0], [[0.4], [-0.1]])
    return WaveFunction(electron_muon, state, 0.0)


@pytest.fixture
def disjoint_psi(electron_muon):
    """Packets 20 widths apart, the disjoint-support regime."""
    state = product_state([[0.0], [20.0]], [1.0, 1.0], [[0.7], [-0.3]])
    return WaveFunction(electron_muon, state, 0.0)


def symmetric_pair_psi(statistics: str = "boson", time: float = 0.0) -> WaveFunction:
    base = GaussianProductState(centers=[[0.0], [1.0]], widths=[1.0, 0.8],
                                wavevecs=[[0.4], [-0.3]],
                                spinors=(np.ones(1), np.ones(1)))
    return WaveFunction(uniform_species(2), exchange_symmetrize(base, statistics), time)


def symmetric_triple_psi(statistics: str = "boson", time: float = 0.0) -> WaveFunction:
    base = GaussianProductState(centers=[[0.0], [1.2], [-0.9]], widths=[1.0, 0.8, 1.1],
                                wavevecs=[[0.4], [-0.3], [0.1]],
                                spinors=(np.ones(1),) * 3)
    return WaveFunction(uniform_species(3), exchange_symmetrize(base, statistics), time)
