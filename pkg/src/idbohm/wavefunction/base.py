"""Wave-function facade over the analytic and grid backends.

A :class:`WaveFunction` is an immutable snapshot: species table, backend
payload, and a time stamp.  ``evolve`` produces a new snapshot; the analytic
backend evolves exactly (free dispersion in closed form), the grid backend by
Strang-split spectral steps.  Evaluation, density, per-particle gradients and
probability currents share one batched code path so that single-point calls
and vectorized ensemble calls are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..core import LabeledConfiguration, SpeciesTable
from .gaussian import GaussianSuperposition
from .grid import GridState, evolve_grid

__all__ = ["WaveFunction", "analytic_wavefunction", "grid_wavefunction"]


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Species table + backend payload + time stamp."""

    species: SpeciesTable
    state: GaussianSuperposition | GridState
    time: float = 0.0

    def __post_init__(self) -> None:
        n = self.species.n_particles
        if self.state.n_particles != n:
            raise ValueError("backend particle count does not match species table")
        if isinstance(self.state, GaussianSuperposition):
            if self.state.internal_dims != self.species.internal_dims:
                raise ValueError("spinor dimensions do not match species table")
        elif isinstance(self.state, GridState):
            if self.state.geometry.w_dim != self.species.internal_dim_total:
                raise ValueError("grid internal dimension does not match species table")
        else:
            raise TypeError(f"unsupported backend {type(self.state).__name__}")

    @property
    def is_analytic(self) -> bool:
        return isinstance(self.state, GaussianSuperposition)

    @property
    def dim(self) -> int:
        return self.state.dim

    @property
    def n_particles(self) -> int:
        return self.species.n_particles

    @property
    def internal_dim(self) -> int:
        return self.species.internal_dim_total

    # batched evaluation -------------------------------------------------------

    def values_and_gradients(self, configs: np.ndarray, at_times=None,
                             want_gradients: bool = True):
        """Spinor values (..., W) and gradients (..., N, d, W) for a batch.

        ``at_times`` (analytic backend only) evaluates the freely evolved
        state at other instants than the snapshot time; the grid backend only
        knows its own time.
        """
        configs = np.asarray(configs, dtype=float)
        if self.is_analytic:
            t = self.time if at_times is None else at_times
            return self.state.values_and_gradients(self.species, configs, t,
                                                   want_gradients)
        if at_times is not None and np.any(np.asarray(at_times) != self.time):
            raise ValueError("grid backend snapshots evaluate at their own time only")
        values = self.state.evaluate_points(configs)
        grads = self.state.gradient_points(configs) if want_gradients else None
        return values, grads

    def densities_and_currents(self, configs: np.ndarray, at_times=None):
        """Density (...,) and per-slot currents (..., N, d) for a batch."""
        values, grads = self.values_and_gradients(configs, at_times)
        rho = np.sum(np.abs(values) ** 2, axis=-1)
        hbar = self.species.hbar
        masses = self.species.masses
        # j_i = (hbar / m_i) Im <psi, grad_i psi>, the internal space contracted
        cur = np.imag(np.einsum("...w,...ndw->...nd", np.conj(values), grads))
        cur = cur * (hbar / masses)[:, None]
        return rho, cur

    # spec operations ----------------------------------------------------------

    def evaluate(self, c: LabeledConfiguration) -> np.ndarray:
        """Spinor value at one labeled configuration, shape (W,)."""
        values, _ = self.values_and_gradients(c.points, want_gradients=False)
        return values

    def density(self, c: LabeledConfiguration) -> float:
        value = self.evaluate(c)
        return float(np.sum(np.abs(value) ** 2))

    def gradient(self, c: LabeledConfiguration, i: int) -> np.ndarray:
        """Gradient of the spinor value along particle i, shape (d, W)."""
        _, grads = self.values_and_gradients(c.points)
        return grads[i]

    def current(self, c: LabeledConfiguration, i: int) -> np.ndarray:
        """Probability current of particle i, shape (d,)."""
        _, cur = self.densities_and_currents(c.points)
        return cur[i]

    def evolve(self, dt: float, substeps: int | None = None) -> "WaveFunction":
        """New snapshot at time + dt.  dt = 0 returns self; dt < 0 is an error."""
        if dt < 0:
            raise ValueError(f"time step must be nonnegative, got {dt}")
        if dt == 0.0:
            return self
        if self.is_analytic:
            return replace(self, time=self.time + dt)
        state = evolve_grid(self.state, dt, substeps=substeps or 1)
        return WaveFunction(self.species, state, self.time + dt)

    def norm(self) -> float:
        if self.is_analytic:
            return self.state.norm(self.species, self.time)
        return self.state.norm()

    def sample_positions(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m labeled configurations drawn from |psi|^2, shape (m, N, d)."""
        if self.is_analytic:
            return self.state.sample_positions(self.species, self.time, m, rng)
        return _sample_grid(self.state, m, rng)


def _sample_grid(state: GridState, m: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling on the flattened cell masses, uniform within cells."""
    geo = state.geometry
    rho = state.density_array().reshape(-1)
    total = float(rho.sum())
    if total <= 0:
        raise ValueError("grid density is identically zero")
    cdf = np.cumsum(rho) / total
    cells = np.searchsorted(cdf, rng.random(m), side="left")
    idx = np.empty((m, geo.n_axes), dtype=np.int64)
    rem = cells
    for g in range(geo.n_axes):
        stride = geo.n ** (geo.n_axes - 1 - g)
        idx[:, g], rem = np.divmod(rem, stride)
    pts = (idx + rng.random((m, geo.n_axes))) * geo.spacing
    return pts.reshape(m, geo.species.n_particles, geo.dim)


def analytic_wavefunction(species: SpeciesTable, state: GaussianSuperposition,
                          time: float = 0.0) -> WaveFunction:
    return WaveFunction(species, state, time)


def grid_wavefunction(species: SpeciesTable, state: GridState,
                      time: float = 0.0) -> WaveFunction:
    return WaveFunction(species, state, time)
