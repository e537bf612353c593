"""Wave functions on labeled configuration space: analytic Gaussian products
(free evolution, machine-precision oracles) and a periodic spectral grid
(arbitrary scalar or Hermitian-matrix potentials)."""

from .base import WaveFunction, analytic_wavefunction, grid_wavefunction
from .gaussian import (
    GaussianProductState,
    GaussianSuperposition,
    exchange_symmetrize,
    product_state,
    superpose,
)
from .grid import (
    GridGeometry,
    GridState,
    OutOfBoxError,
    UnstableStepError,
    evolve_grid,
    grid_from_analytic,
    load_grid_state,
    save_grid_state,
)

__all__ = [
    "WaveFunction",
    "analytic_wavefunction",
    "grid_wavefunction",
    "GaussianProductState",
    "GaussianSuperposition",
    "product_state",
    "superpose",
    "exchange_symmetrize",
    "GridGeometry",
    "GridState",
    "OutOfBoxError",
    "UnstableStepError",
    "evolve_grid",
    "grid_from_analytic",
    "save_grid_state",
    "load_grid_state",
]
