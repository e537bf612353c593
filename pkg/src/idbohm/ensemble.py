"""|psi|^2-distributed ensembles: sampling, parallel propagation, and the
statistical verification of equivariance and the canonicalized marginal
identity between the two laws.

Randomness policy: every random consumer draws from its own
numpy ``SeedSequence((seed, purpose))`` stream, with fixed purpose counters
(0 initial samples, 1 reference samples, 2/3 the two branches of the
marginal-identity split).  Trajectories themselves are deterministic, so
results are bitwise reproducible for a given seed and independent of the
worker count.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import LabeledConfiguration
from .dynamics import (
    TrajectoryRecord,
    VelocityLaw,
    _canonical_sort_rows,
    _integrate_batch,
)
from .stats import ks_statistic, ks_threshold_one_sample, ks_threshold_two_sample, ks_two_sample
from .wavefunction import WaveFunction

__all__ = [
    "EnsembleSpec",
    "AxisStat",
    "TimeSlice",
    "EquivarianceReport",
    "MarginalIdentityResult",
    "sample_initial",
    "propagate_ensemble",
    "equivariance_test",
    "marginal_identity_test",
    "continuity_residual_scan",
    "worker_count",
]

_PURPOSE_INITIAL = 0
_PURPOSE_REFERENCE = 1
_PURPOSE_MARGINAL_A = 2
_PURPOSE_MARGINAL_B = 3

MIN_SAMPLES = 100
WORKERS_ENV = "IDBOHM_WORKERS"


def worker_count(override: int | None = None) -> int:
    if override is not None:
        return max(1, int(override))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


@dataclass(frozen=True)
class EnsembleSpec:
    """Sample count, seed, law, and the observation times of one ensemble run."""

    size: int
    seed: int
    law: VelocityLaw
    observation_times: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("ensemble size must be >= 1")
        times = tuple(float(t) for t in self.observation_times)
        if len(times) == 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("observation times must be strictly increasing")
        object.__setattr__(self, "observation_times", times)
        object.__setattr__(self, "law", VelocityLaw(self.law))


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(purpose))))


def _sample_array(psi: WaveFunction, m: int, seed: int,
                  purpose: int = _PURPOSE_INITIAL) -> np.ndarray:
    return psi.sample_positions(m, _stream(seed, purpose))


def sample_initial(psi0: WaveFunction, m: int, seed: int) -> list[LabeledConfiguration]:
    """m i.i.d. |psi_0|^2 samples; deterministic for a given seed."""
    pts = _sample_array(psi0, m, seed)
    return [LabeledConfiguration(p) for p in pts]


def propagate_ensemble(spec: EnsembleSpec, psi0: WaveFunction, *,
                       tolerance: float | None = None, dt0: float | None = None,
                       velocity_scale: float = 1.0, workers: int | None = None,
                       wave_step: float = 1e-3,
                       starts: np.ndarray | None = None) -> list[TrajectoryRecord]:
    """Sample, integrate, and return one TrajectoryRecord per ensemble member.

    Aborted trajectories are recorded with their abort status, never raised.
    Output order always matches input order; chunking across workers cannot
    change any per-trajectory result.
    """
    if starts is None:
        starts = _sample_array(psi0, spec.size, spec.seed)
    obs = np.asarray(spec.observation_times, dtype=float)
    if obs[0] <= psi0.time:
        raise ValueError("observation times must lie after the initial time")
    if tolerance is None:
        tolerance = 1e-8 if psi0.is_analytic else 1e-5
    if dt0 is None:
        dt0 = min(1e-2, (obs[-1] - psi0.time) / 8.0)
    n_workers = worker_count(workers)

    def run(chunk: np.ndarray):
        return _integrate_batch(psi0, spec.law, chunk, obs, dt0, tolerance,
                                velocity_scale=velocity_scale, wave_step=wave_step)

    if n_workers == 1 or spec.size < 4 * n_workers:
        results = [run(starts)]
    else:
        from joblib import Parallel, delayed
        chunks = np.array_split(starts, n_workers)
        results = Parallel(n_jobs=n_workers)(delayed(run)(c) for c in chunks)
    records: list[TrajectoryRecord] = []
    for res in results:
        records.extend(res.record(b, spec.law) for b in range(res.status.shape[0]))
    return records


# equivariance -------------------------------------------------------------------


@dataclass(frozen=True)
class AxisStat:
    label: str
    statistic: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.statistic < self.threshold


@dataclass(frozen=True)
class TimeSlice:
    time: float
    n_samples: int
    aborted_fraction: float
    axes: tuple[AxisStat, ...]

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.axes)


@dataclass(frozen=True)
class EquivarianceReport:
    law: VelocityLaw
    alpha: float
    slices: tuple[TimeSlice, ...]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.slices)

    def to_json_dict(self) -> dict:
        return {
            "law": self.law.value,
            "alpha": self.alpha,
            "passed": self.passed,
            "slices": [
                {
                    "time": s.time,
                    "n_samples": s.n_samples,
                    "aborted_fraction": s.aborted_fraction,
                    "axes": [
                        {"label": a.label, "statistic": a.statistic,
                         "threshold": a.threshold, "passed": a.passed}
                        for a in s.axes
                    ],
                }
                for s in self.slices
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time\taxis\tks_statistic\tthreshold\tpassed\t"
                     "n_samples\taborted_fraction\n")
            for s in self.slices:
                for a in s.axes:
                    fh.write(f"{s.time:.9g}\t{a.label}\t{a.statistic:.6g}\t"
                             f"{a.threshold:.6g}\t{int(a.passed)}\t{s.n_samples}\t"
                             f"{s.aborted_fraction:.6g}\n")


def _endpoint_arrays(records: list[TrajectoryRecord]):
    """Shared observation times, per-time state stacks, and abort fractions."""
    times = None
    for r in records:
        if r.status == "completed":
            times = r.times
            break
    if times is None:
        raise ValueError("no completed trajectory in the ensemble")
    per_time_states = []
    per_time_count = []
    total = len(records)
    for k in range(len(times)):
        stack = [r.states[k] for r in records if r.n_times > k]
        per_time_states.append(np.array(stack))
        per_time_count.append(len(stack))
    aborted = sum(1 for r in records if r.status != "completed")
    return times, per_time_states, per_time_count, aborted / total


def _grid_marginal_cdf(psi_t: WaveFunction, particle: int, axis: int):
    """Piecewise-linear CDF of one axis from the grid cell masses."""
    geo = psi_t.state.geometry
    rho = psi_t.state.density_array()
    g = particle * geo.dim + axis
    other = tuple(a for a in range(geo.n_axes) if a != g)
    mass = np.sum(rho, axis=other) if other else rho
    mass = mass / mass.sum()
    edges = np.concatenate([[0.0], np.cumsum(mass)])
    nodes = np.concatenate([geo.axis_coords, [geo.length]])

    def cdf(xs):
        return np.interp(xs, nodes, edges)

    return cdf


def equivariance_test(records: list[TrajectoryRecord], psi0: WaveFunction,
                      law: VelocityLaw, *, reference_samples: int = 10 ** 6,
                      seed: int = 0, alpha: float = 0.01) -> EquivarianceReport:
    """Compare ensemble marginals at every observation time against |psi_t|^2.

    Standard law: one-sample KS per labeled coordinate axis against the exact
    (analytic) or cell-mass (grid) marginal CDF.  Identity-based law: the
    canonical-order coordinates are compared against ``reference_samples``
    direct draws from |psi_t|^2 pushed through canonicalization, by
    two-sample KS.
    """
    law = VelocityLaw(law)
    if len(records) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} trajectories, got {len(records)}")
    times, state_stacks, counts, aborted_fraction = _endpoint_arrays(records)
    n, d = state_stacks[0].shape[1:]
    slices = []
    for k, t in enumerate(times):
        states = state_stacks[k]
        m = counts[k]
        axes = []
        psi_t = psi0.evolve(t - psi0.time)
        if law is VelocityLaw.STANDARD:
            thr = ks_threshold_one_sample(m, alpha)
            for i in range(n):
                for a in range(d):
                    if psi_t.is_analytic:
                        cdf = lambda xs, i=i, a=a: psi_t.state.marginal_cdf(
                            psi_t.species, psi_t.time, i, a, xs)
                    else:
                        cdf = _grid_marginal_cdf(psi_t, i, a)
                    stat = ks_statistic(states[:, i, a], cdf)
                    axes.append(AxisStat(f"q{i}_{a}", stat, thr))
        else:
            ref = _sample_array(psi_t, reference_samples, seed,
                                purpose=_PURPOSE_REFERENCE)
            ref = _canonical_sort_rows(ref)
            thr = ks_threshold_two_sample(m, reference_samples, alpha)
            for i in range(n):
                for a in range(d):
                    stat = ks_two_sample(states[:, i, a], ref[:, i, a])
                    axes.append(AxisStat(f"c{i}_{a}", stat, thr))
        slices.append(TimeSlice(time=float(t), n_samples=m,
                                aborted_fraction=aborted_fraction,
                                axes=tuple(axes)))
    return EquivarianceReport(law=law, alpha=alpha, slices=tuple(slices))


# two-law marginal identity ---------------------------------------------------------


@dataclass(frozen=True)
class MarginalIdentityResult:
    time: float
    sample_size: int
    alpha: float
    axes: tuple[AxisStat, ...]
    aborted_fraction_standard: float
    aborted_fraction_identity: float

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.axes)

    @property
    def max_statistic(self) -> float:
        return max(a.statistic for a in self.axes)

    def to_json_dict(self) -> dict:
        return {
            "time": self.time,
            "sample_size": self.sample_size,
            "alpha": self.alpha,
            "passed": self.passed,
            "aborted_fraction_standard": self.aborted_fraction_standard,
            "aborted_fraction_identity": self.aborted_fraction_identity,
            "axes": [{"label": a.label, "statistic": a.statistic,
                      "threshold": a.threshold, "passed": a.passed}
                     for a in self.axes],
        }


def marginal_identity_test(psi0: WaveFunction, m: int, t: float, *, seed: int = 0,
                           alpha: float = 0.01, tolerance: float | None = None,
                           psi_identity: WaveFunction | None = None,
                           workers: int | None = None,
                           law_a: VelocityLaw = VelocityLaw.STANDARD,
                           law_b: VelocityLaw = VelocityLaw.IDENTITY_BASED,
                           ) -> MarginalIdentityResult:
    """Two-sample comparison of the unordered endpoint distributions of two laws.

    Propagates independent |psi_0|^2 ensembles (seed split by purpose counter)
    under ``law_a`` and ``law_b`` to time t, canonicalizes both endpoint sets,
    and KS-compares each canonical coordinate.  ``psi_identity`` substitutes a
    different wave function on the second side (negative control).
    """
    if m < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples per side, got {m}")
    psi_b = psi_identity if psi_identity is not None else psi0
    spec_a = EnsembleSpec(m, seed, law_a, (t,))
    spec_b = EnsembleSpec(m, seed, law_b, (t,))
    starts_a = _sample_array(psi0, m, seed, purpose=_PURPOSE_MARGINAL_A)
    starts_b = _sample_array(psi_b, m, seed, purpose=_PURPOSE_MARGINAL_B)
    recs_a = propagate_ensemble(spec_a, psi0, tolerance=tolerance, workers=workers,
                                starts=starts_a)
    recs_b = propagate_ensemble(spec_b, psi_b, tolerance=tolerance, workers=workers,
                                starts=starts_b)
    ends_a = np.array([r.states[-1] for r in recs_a if r.status == "completed"])
    ends_b = np.array([r.states[-1] for r in recs_b if r.status == "completed"])
    ab_a = 1.0 - len(ends_a) / m
    ab_b = 1.0 - len(ends_b) / m
    ends_a = _canonical_sort_rows(ends_a)
    ends_b = _canonical_sort_rows(ends_b)
    n, d = ends_a.shape[1:]
    thr = ks_threshold_two_sample(len(ends_a), len(ends_b), alpha)
    axes = []
    for i in range(n):
        for a in range(d):
            stat = ks_two_sample(ends_a[:, i, a], ends_b[:, i, a])
            axes.append(AxisStat(f"c{i}_{a}", stat, thr))
    return MarginalIdentityResult(time=t, sample_size=m, alpha=alpha, axes=tuple(axes),
                                  aborted_fraction_standard=ab_a,
                                  aborted_fraction_identity=ab_b)


# continuity ------------------------------------------------------------------------


def _axis_permutation(n_particles: int, dim: int, image: tuple[int, ...],
                      trailing: int = 0) -> tuple[int, ...]:
    """Grid-axis permutation realizing F(sigma Q): block l comes from sigma^-1(l)."""
    inv = np.argsort(np.array(image))
    axes = []
    for l in range(n_particles):
        axes.extend(range(int(inv[l]) * dim, (int(inv[l]) + 1) * dim))
    axes.extend(range(n_particles * dim, n_particles * dim + trailing))
    return tuple(axes)


def continuity_residual_scan(psi: WaveFunction, law: VelocityLaw, t: float,
                             dt: float = 1e-3) -> float:
    """Relative L2 residual of the continuity equation on the grid at time t.

    Standard law: d rho/dt + div j, the time derivative centered over
    [t, t + 2 dt] and the divergence spectral.  Identity-based law: the same
    residual after summing density and slot currents over all relabelings
    (the symmetrized current of slot i gathers j_sigma(i) at sigma Q).
    """
    import itertools as _it

    law = VelocityLaw(law)
    if psi.is_analytic:
        raise ValueError("the continuity scan needs the grid backend")
    psi_0 = psi.evolve(max(0.0, t - psi.time))
    psi_mid = psi_0.evolve(dt)
    psi_2 = psi_mid.evolve(dt)
    rho_0 = psi_0.state.density_array()
    rho_2 = psi_2.state.density_array()
    drho_dt = (rho_2 - rho_0) / (2.0 * dt)
    cur = psi_mid.state.current_arrays()  # (axes,) + grid

    if law is VelocityLaw.STANDARD:
        residual = drho_dt + psi_mid.state.divergence(cur)
        return float(np.linalg.norm(residual) / np.linalg.norm(psi_mid.state.density_array()))

    geo = psi_mid.state.geometry
    n, d = psi.n_particles, geo.dim
    rho_mid = psi_mid.state.density_array()
    rho_sym_dot = np.zeros_like(rho_mid)
    div_sym = np.zeros_like(rho_mid)
    rho_sym = np.zeros_like(rho_mid)
    for image in _it.permutations(range(n)):
        axes = _axis_permutation(n, d, image)
        rho_sym_dot += np.transpose(drho_dt, axes)
        rho_sym += np.transpose(rho_mid, axes)
        # slot i of the symmetrized current takes j_sigma(i) at sigma Q
        for i in range(n):
            for a in range(d):
                field = np.transpose(cur[image[i] * d + a], axes)
                div_sym += _spectral_derivative(psi_mid.state, field, i * d + a)
    residual = rho_sym_dot + div_sym
    return float(np.linalg.norm(residual) / np.linalg.norm(rho_sym))


def _spectral_derivative(state, field: np.ndarray, axis: int) -> np.ndarray:
    geo = state.geometry
    shape = [1] * geo.n_axes
    shape[axis] = geo.n
    mult = (1j * geo.kappa).reshape(shape)
    axes = tuple(range(geo.n_axes))
    return np.real(np.fft.ifftn(np.fft.fftn(field, axes=axes) * mult, axes=axes))
