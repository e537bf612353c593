"""Periodic spectral-grid backend.

The amplitude lives on a uniform periodic grid over [0, L)^(d*N) with n
points per axis (n a power of two) and a trailing internal-space axis of
dimension W = k_1 * .. * k_N.  Time evolution is a Strang-split step: half a
potential phase, a full kinetic step applied as the Fourier multiplier
exp(-i hbar |kappa_i|^2 dt / (2 m_i)) per particle, then the second half of
the potential phase.  The potential may be a real scalar field or a field of
Hermitian W x W matrices, applied by exact per-node exponentiation.

Off-grid evaluation is multilinear interpolation (accuracy O(h^2));
derivatives are spectral (Fourier multiplier) and then interpolated.
Points outside [0, L) raise :class:`OutOfBoxError` -- wrap-around is treated
as a physics error, not a feature.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..core import SpeciesTable

__all__ = [
    "OutOfBoxError",
    "UnstableStepError",
    "GridGeometry",
    "GridState",
    "evolve_grid",
    "grid_from_analytic",
    "save_grid_state",
    "load_grid_state",
]

NORM_RENORM_THRESHOLD = 1e-12
NORM_UNSTABLE_THRESHOLD = 1e-6


class OutOfBoxError(ValueError):
    """Evaluation point lies outside the periodic box [0, L)."""


class UnstableStepError(RuntimeError):
    """A split step changed the norm by more than the stability threshold."""


class GridGeometry:
    """Static grid data shared by all snapshots of one wave function."""

    def __init__(self, species: SpeciesTable, dim: int, n: int, length: float,
                 potential: np.ndarray | None = None):
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"grid points per axis must be a power of two, got {n}")
        if not (length > 0 and math.isfinite(length)):
            raise ValueError(f"box length must be positive, got {length}")
        if dim < 1:
            raise ValueError(f"space dimension must be >= 1, got {dim}")
        self.species = species
        self.dim = int(dim)
        self.n = int(n)
        self.length = float(length)
        self.n_axes = self.dim * species.n_particles
        self.w_dim = species.internal_dim_total
        self.spacing = self.length / self.n
        self.axis_coords = np.arange(self.n) * self.spacing
        self.kappa = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)
        self.grid_shape = (self.n,) * self.n_axes
        self.potential = self._check_potential(potential)
        self._kinetic_cache: dict[float, np.ndarray] = {}
        self._potential_eig: tuple[np.ndarray, np.ndarray] | None = None

    def _check_potential(self, v: np.ndarray | None) -> np.ndarray | None:
        if v is None:
            return None
        v = np.asarray(v)
        if v.shape == self.grid_shape:
            return v.astype(float)
        if v.shape == self.grid_shape + (self.w_dim, self.w_dim):
            herm = np.max(np.abs(v - np.conj(np.swapaxes(v, -1, -2))))
            if herm > 1e-10:
                raise ValueError(f"matrix potential is not Hermitian (residual {herm:.2e})")
            return v.astype(complex)
        raise ValueError(f"potential shape {v.shape} matches neither scalar "
                         f"{self.grid_shape} nor matrix layout")

    @property
    def is_matrix_potential(self) -> bool:
        return self.potential is not None and self.potential.ndim == len(self.grid_shape) + 2

    @cached_property
    def kinetic_exponent(self) -> np.ndarray:
        """sum_i |kappa_i|^2 / (2 m_i) on the full grid."""
        masses = self.species.masses
        out = np.zeros(self.grid_shape)
        for axis in range(self.n_axes):
            shape = [1] * self.n_axes
            shape[axis] = self.n
            out = out + (self.kappa ** 2).reshape(shape) / (2.0 * masses[axis // self.dim])
        return out

    def kinetic_phase(self, dt: float) -> np.ndarray:
        key = float(dt)
        if key not in self._kinetic_cache:
            if len(self._kinetic_cache) > 8:
                self._kinetic_cache.clear()
            hbar = self.species.hbar
            self._kinetic_cache[key] = np.exp(-1j * hbar * dt * self.kinetic_exponent)
        return self._kinetic_cache[key]

    def apply_half_potential(self, amps: np.ndarray, dt: float) -> np.ndarray:
        if self.potential is None:
            return amps
        hbar = self.species.hbar
        if not self.is_matrix_potential:
            phase = np.exp(-0.5j * dt * self.potential / hbar)
            return amps * phase[..., None]
        if self._potential_eig is None:
            self._potential_eig = np.linalg.eigh(self.potential)
        evals, evecs = self._potential_eig
        phase = np.exp(-0.5j * dt * evals / hbar)
        coeff = np.einsum("...ji,...j->...i", np.conj(evecs), amps)
        return np.einsum("...ij,...j->...i", evecs, phase * coeff)

    def point_grid(self) -> np.ndarray:
        """All grid nodes as labeled configurations, shape (n^axes, N, d)."""
        mesh = np.meshgrid(*([self.axis_coords] * self.n_axes), indexing="ij")
        flat = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        return flat.reshape(-1, self.species.n_particles, self.dim)


@dataclass(frozen=True, eq=False)
class GridState:
    """One immutable snapshot of grid amplitudes, shape grid + (W,)."""

    amplitudes: np.ndarray
    geometry: GridGeometry

    def __post_init__(self) -> None:
        geo = self.geometry
        amps = np.ascontiguousarray(self.amplitudes, dtype=complex)
        if amps.shape != geo.grid_shape + (geo.w_dim,):
            raise ValueError(f"amplitude shape {amps.shape} does not match grid "
                             f"{geo.grid_shape + (geo.w_dim,)}")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_particles(self) -> int:
        return self.geometry.species.n_particles

    @property
    def dim(self) -> int:
        return self.geometry.dim

    def norm(self) -> float:
        geo = self.geometry
        cell = geo.spacing ** geo.n_axes
        return math.sqrt(cell * float(np.sum(np.abs(self.amplitudes) ** 2)))

    # interpolation ----------------------------------------------------------

    def _fractional_indices(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        geo = self.geometry
        flat = np.asarray(points, dtype=float).reshape(-1, geo.n_axes)
        if np.any(flat < 0.0) or np.any(flat >= geo.length):
            bad = flat[np.any((flat < 0.0) | (flat >= geo.length), axis=1)][0]
            raise OutOfBoxError(f"point {bad} outside the box [0, {geo.length})")
        f = flat / geo.spacing
        i0 = np.floor(f).astype(np.int64)
        i0 = np.minimum(i0, geo.n - 1)  # guard x == (n-1)*h + rounding
        return i0, f - i0

    def _interpolate(self, field: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of ``field`` (grid + trailing axes)."""
        geo = self.geometry
        i0, w = self._fractional_indices(points)
        trailing = field.shape[geo.n_axes:]
        flat_field = field.reshape((-1,) + trailing)
        strides = np.array([geo.n ** (geo.n_axes - 1 - g) for g in range(geo.n_axes)],
                           dtype=np.int64)
        out = np.zeros((i0.shape[0],) + trailing, dtype=field.dtype)
        for corner in itertools.product((0, 1), repeat=geo.n_axes):
            c = np.array(corner, dtype=np.int64)
            idx = ((i0 + c) % geo.n) @ strides
            weight = np.prod(np.where(c == 1, w, 1.0 - w), axis=1)
            out += weight.reshape((-1,) + (1,) * len(trailing)) * flat_field[idx]
        return out.reshape(np.asarray(points).shape[:-2] + trailing)

    def evaluate_points(self, points: np.ndarray) -> np.ndarray:
        """Interpolated spinor values, shape (..., W)."""
        return self._interpolate(self.amplitudes, points)

    @cached_property
    def _gradient_field(self) -> np.ndarray:
        """Spectral gradients, shape grid + (axes, W)."""
        geo = self.geometry
        axes = tuple(range(geo.n_axes))
        spec = np.fft.fftn(self.amplitudes, axes=axes)
        out = np.empty(geo.grid_shape + (geo.n_axes, geo.w_dim), dtype=complex)
        for g in range(geo.n_axes):
            shape = [1] * geo.n_axes
            shape[g] = geo.n
            mult = (1j * geo.kappa).reshape(shape + [1])
            out[..., g, :] = np.fft.ifftn(spec * mult, axes=axes)
        return out

    def gradient_points(self, points: np.ndarray) -> np.ndarray:
        """Interpolated spectral gradients, shape (..., N, d, W)."""
        geo = self.geometry
        flat = self._interpolate(self._gradient_field, points)
        lead = flat.shape[:-2]
        return flat.reshape(lead + (geo.species.n_particles, geo.dim, geo.w_dim))

    def laplacian_points(self, points: np.ndarray) -> np.ndarray:
        """Per-particle spectral Laplacians, shape (..., N, W)."""
        geo = self.geometry
        axes = tuple(range(geo.n_axes))
        spec = np.fft.fftn(self.amplitudes, axes=axes)
        per_particle = np.empty(geo.grid_shape + (geo.species.n_particles, geo.w_dim),
                                dtype=complex)
        for i in range(geo.species.n_particles):
            ksq = np.zeros(geo.grid_shape)
            for ax in range(i * geo.dim, (i + 1) * geo.dim):
                shape = [1] * geo.n_axes
                shape[ax] = geo.n
                ksq = ksq + (geo.kappa ** 2).reshape(shape)
            per_particle[..., i, :] = np.fft.ifftn(spec * (-ksq)[..., None], axes=axes)
        return self._interpolate(per_particle, points)

    # whole-grid fields --------------------------------------------------------

    def density_array(self) -> np.ndarray:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=-1)

    def current_arrays(self) -> np.ndarray:
        """Probability current per grid axis, shape (axes,) + grid."""
        geo = self.geometry
        masses = geo.species.masses
        grads = self._gradient_field
        out = np.empty((geo.n_axes,) + geo.grid_shape)
        for g in range(geo.n_axes):
            mass = masses[g // geo.dim]
            out[g] = (geo.species.hbar / mass) * np.imag(
                np.sum(np.conj(self.amplitudes) * grads[..., g, :], axis=-1))
        return out

    def divergence(self, fields: np.ndarray) -> np.ndarray:
        """Spectral divergence of per-axis fields, shape (axes,) + grid -> grid."""
        geo = self.geometry
        axes = tuple(range(geo.n_axes))
        out = np.zeros(geo.grid_shape)
        for g in range(geo.n_axes):
            shape = [1] * geo.n_axes
            shape[g] = geo.n
            mult = (1j * geo.kappa).reshape(shape)
            out = out + np.real(np.fft.ifftn(np.fft.fftn(fields[g], axes=axes) * mult,
                                             axes=axes))
        return out


def evolve_grid(state: GridState, dt: float, substeps: int = 1) -> GridState:
    """Strang-split evolution by dt (possibly divided into equal substeps)."""
    if dt < 0:
        raise ValueError(f"time step must be nonnegative, got {dt}")
    if dt == 0.0:
        return state
    geo = state.geometry
    pre_norm = state.norm()
    amps = state.amplitudes
    h = dt / substeps
    axes = tuple(range(geo.n_axes))
    kin = geo.kinetic_phase(h)
    for _ in range(substeps):
        amps = geo.apply_half_potential(amps, h)
        amps = np.fft.ifftn(np.fft.fftn(amps, axes=axes) * kin[..., None], axes=axes)
        amps = geo.apply_half_potential(amps, h)
    out = GridState(amps, geo)
    drift = abs(out.norm() / pre_norm - 1.0) if pre_norm > 0 else 0.0
    if drift > NORM_UNSTABLE_THRESHOLD:
        raise UnstableStepError(f"norm drifted by {drift:.3e} in one evolution call")
    if drift > NORM_RENORM_THRESHOLD:
        out = GridState(amps * (pre_norm / out.norm()), geo)
    return out


def grid_from_analytic(species: SpeciesTable, analytic, t: float, dim: int, n: int,
                       length: float, potential: np.ndarray | None = None,
                       renormalize: bool = True) -> GridState:
    """Sample an analytic superposition onto grid nodes at time t."""
    geo = GridGeometry(species, dim, n, length, potential)
    pts = geo.point_grid()
    vals, _ = analytic.values_and_gradients(species, pts, t, want_gradients=False)
    amps = vals.reshape(geo.grid_shape + (geo.w_dim,))
    state = GridState(amps, geo)
    if renormalize:
        nrm = state.norm()
        if nrm < 1e-300:
            raise ValueError("sampled state has zero norm on the grid")
        state = GridState(amps / nrm, geo)
    return state


# Checkpoint layout, all little-endian:
#   int32 d, int32 N, int32 n, float64 L, int32 W, float64 time,
# then n^(d*N) * W complex128 amplitudes in row-major (C) order.
_HEADER = struct.Struct("<iii d i d")


def save_grid_state(path, state: GridState, time: float) -> None:
    geo = state.geometry
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(geo.dim, geo.species.n_particles, geo.n, geo.length,
                              geo.w_dim, float(time)))
        fh.write(np.ascontiguousarray(state.amplitudes, dtype=np.complex128).tobytes())


def load_grid_state(path, species: SpeciesTable,
                    potential: np.ndarray | None = None) -> tuple[GridState, float]:
    """Load a checkpoint; the potential is scenario data and not stored."""
    with open(path, "rb") as fh:
        d, n_part, n, length, w_dim, time = _HEADER.unpack(fh.read(_HEADER.size))
        if n_part != species.n_particles or w_dim != species.internal_dim_total:
            raise ValueError("checkpoint does not match the species table")
        count = n ** (d * n_part) * w_dim
        amps = np.frombuffer(fh.read(count * 16), dtype=np.complex128, count=count)
    geo = GridGeometry(species, d, n, length, potential)
    return GridState(amps.reshape(geo.grid_shape + (w_dim,)), geo), time
