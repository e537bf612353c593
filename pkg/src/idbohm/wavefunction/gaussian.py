"""Analytic Gaussian-product backend (free evolution only).

A product term assigns each particle slot a d-dimensional Gaussian packet

    f(x) = (2 pi s0^2)^(-d/4) exp(-(x - c)^2 / (4 s0^2) + i k.(x - c))

and a per-particle spinor factor.  Free evolution keeps every axis factor in
the complex-exponent family exp(-a x^2 + b x + logA), with

    lambda = i hbar t / (2 m),   alpha(t) = 1 + lambda / s0^2,
    a(t) = a(0) / alpha,   b(t) = b(0) / alpha,
    logA(t) = logA(0) - log(alpha) / 2 + lambda b(0)^2 / alpha,

so evaluation, differentiation, pairwise overlaps, marginal CDFs, and
|psi|^2 sampling are all closed-form at any time.  Superpositions of product
terms are the closure needed for exchange-(anti)symmetrized states; a single
product is the one-term case.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import erf

from ..core import Permutation, SpeciesTable, permutation_sign

__all__ = [
    "GaussianProductState",
    "GaussianSuperposition",
    "product_state",
    "superpose",
    "exchange_symmetrize",
]


def _complexify(x) -> np.ndarray:
    return np.asarray(x, dtype=complex)


@dataclass(frozen=True, eq=False)
class GaussianProductState:
    """One Gaussian product term: per-particle packet and spinor factor.

    ``spinors[i]`` is normalized to unit norm at construction, so the product
    term itself has unit L^2 norm.
    """

    centers: np.ndarray   # (N, d)
    widths: np.ndarray    # (N,)
    wavevecs: np.ndarray  # (N, d)
    spinors: tuple[np.ndarray, ...]
    phase: float = 0.0

    def __post_init__(self) -> None:
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        n, d = centers.shape
        widths = np.asarray(self.widths, dtype=float).reshape(n)
        wavevecs = np.asarray(self.wavevecs, dtype=float).reshape(n, d)
        if np.any(widths <= 0) or not np.all(np.isfinite(widths)):
            raise ValueError("packet widths must be positive and finite")
        spinors = []
        for i, s in enumerate(self.spinors):
            s = _complexify(s).reshape(-1)
            nrm = math.sqrt(float(np.sum(np.abs(s) ** 2)))
            if nrm == 0.0:
                raise ValueError(f"spinor factor {i} is zero")
            spinors.append(s / nrm)
        if len(spinors) != n:
            raise ValueError("need one spinor factor per particle")
        for a in (centers, widths, wavevecs):
            a.flags.writeable = False
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "wavevecs", wavevecs)
        object.__setattr__(self, "spinors", tuple(spinors))

    @property
    def n_particles(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def internal_dims(self) -> tuple[int, ...]:
        return tuple(s.size for s in self.spinors)

    def product_spinor(self) -> np.ndarray:
        """Flattened tensor product of the per-particle spinor factors."""
        out = self.spinors[0]
        for s in self.spinors[1:]:
            out = np.kron(out, s)
        return out

    def permuted(self, sigma: Permutation) -> "GaussianProductState":
        """Move the packet of slot i to slot sigma(i) (spinor factors included)."""
        inv = sigma.inverse().image
        return GaussianProductState(
            centers=self.centers[list(inv)],
            widths=self.widths[list(inv)],
            wavevecs=self.wavevecs[list(inv)],
            spinors=tuple(self.spinors[j] for j in inv),
            phase=self.phase,
        )


@dataclass(frozen=True, eq=False)
class GaussianSuperposition:
    """Finite superposition sum_j coef_j * term_j of Gaussian product terms.

    All terms must share particle count, space dimension, and per-particle
    spinor dimensions.  Global term phases are folded into the coefficients.
    """

    terms: tuple[tuple[complex, GaussianProductState], ...]

    def __post_init__(self) -> None:
        terms = tuple((complex(c), t) for c, t in self.terms)
        if not terms:
            raise ValueError("superposition needs at least one term")
        t0 = terms[0][1]
        for _, t in terms[1:]:
            if (t.n_particles, t.dim, t.internal_dims) != (
                    t0.n_particles, t0.dim, t0.internal_dims):
                raise ValueError("all terms must share shape and spinor dimensions")
        object.__setattr__(self, "terms", terms)

    @property
    def n_particles(self) -> int:
        return self.terms[0][1].n_particles

    @property
    def dim(self) -> int:
        return self.terms[0][1].dim

    @property
    def internal_dims(self) -> tuple[int, ...]:
        return self.terms[0][1].internal_dims

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    # stacked term data -----------------------------------------------------

    @cached_property
    def _centers(self) -> np.ndarray:   # (J, N, d)
        return np.stack([t.centers for _, t in self.terms])

    @cached_property
    def _widths(self) -> np.ndarray:    # (J, N)
        return np.stack([t.widths for _, t in self.terms])

    @cached_property
    def _wavevecs(self) -> np.ndarray:  # (J, N, d)
        return np.stack([t.wavevecs for _, t in self.terms])

    @cached_property
    def _coefs(self) -> np.ndarray:     # (J,) with term phases folded in
        return np.array([c * np.exp(1j * t.phase) for c, t in self.terms])

    @cached_property
    def _chis(self) -> np.ndarray:      # (J, W)
        return np.stack([t.product_spinor() for _, t in self.terms])

    def scaled(self, factor: complex) -> "GaussianSuperposition":
        return GaussianSuperposition(tuple((factor * c, t) for c, t in self.terms))

    # closed-form machinery --------------------------------------------------

    def _triples(self, species: SpeciesTable, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Complex exponent data (a, b, logA) per term/particle/axis at time t.

        ``t`` may be a scalar or an array; array times broadcast in front of
        the (J, N, d) term axes.
        """
        t = np.asarray(t, dtype=float)
        tb = t.reshape(t.shape + (1, 1)) if t.ndim else t
        s2 = self._widths ** 2                              # (J, N)
        masses = species.masses                             # (N,)
        lam = 1j * species.hbar * tb / (2.0 * masses)       # (..., 1, N) or (N,)
        alpha = 1.0 + lam / s2                              # (..., J, N)
        a0 = 1.0 / (4.0 * s2)
        b0 = self._centers / (2.0 * s2[..., None]) + 1j * self._wavevecs  # (J, N, d)
        logA0 = (-self._centers ** 2 / (4.0 * s2[..., None])
                 - 1j * self._wavevecs * self._centers
                 - 0.25 * np.log(2.0 * np.pi * s2)[..., None])
        a = a0[..., None] / alpha[..., None]
        b = b0 / alpha[..., None]
        logA = (logA0 - 0.5 * np.log(alpha)[..., None]
                + lam[..., None] * b0 * b0 / alpha[..., None])
        return a, b, logA

    def values_and_gradients(self, species: SpeciesTable, configs: np.ndarray, t,
                             want_gradients: bool = True):
        """Spinor values (..., W) and per-slot gradients (..., N, d, W).

        ``configs`` has shape (..., N, d); ``t`` is a scalar or an array
        broadcastable against the batch shape (...).
        """
        configs = np.asarray(configs, dtype=float)
        a, b, logA = self._triples(species, t)
        x = configs[..., None, :, :]                        # (..., 1, N, d)
        expo = -a * x * x + b * x + logA                    # (..., J, N, d)
        s = np.sum(expo, axis=(-2, -1))                     # (..., J)
        scal = self._coefs * np.exp(s)                      # (..., J)
        values = scal @ self._chis                          # (..., W)
        if not want_gradients:
            return values, None
        dlog = -2.0 * a * x + b                             # (..., J, N, d)
        grads = np.einsum("...j,...jnd,jw->...ndw", scal, dlog, self._chis)
        return values, grads

    def _axis_overlaps(self, species: SpeciesTable, t: float) -> np.ndarray:
        """Pairwise per-axis overlap integrals, shape (J, J, N, d)."""
        a, b, logA = self._triples(species, float(t))
        p = np.conj(a)[:, None] + a[None, :]
        q = np.conj(b)[:, None] + b[None, :]
        r = np.conj(logA)[:, None] + logA[None, :]
        return np.sqrt(np.pi / p) * np.exp(q * q / (4.0 * p) + r)

    def overlap_matrix(self, species: SpeciesTable, t: float = 0.0) -> np.ndarray:
        """Gram matrix <term_j, term_l> (coefficients excluded), shape (J, J)."""
        ov = np.prod(self._axis_overlaps(species, t), axis=(-2, -1))
        spin = np.conj(self._chis) @ self._chis.T
        return ov * spin

    def norm(self, species: SpeciesTable, t: float = 0.0) -> float:
        m = self.overlap_matrix(species, t)
        val = np.real(np.conj(self._coefs) @ m @ self._coefs)
        return math.sqrt(max(float(val), 0.0))

    def normalized(self, species: SpeciesTable | None = None) -> "GaussianSuperposition":
        # Free evolution is unitary, so the t = 0 norm (mass-independent) is
        # the norm for all times.
        species = species or _dummy_species(self.n_particles)
        nrm = self.norm(species, 0.0)
        if nrm < 1e-300:
            raise ValueError("state has zero norm (fully cancelling superposition?)")
        return self.scaled(1.0 / nrm)

    # marginals ---------------------------------------------------------------

    def _pair_weights(self, species: SpeciesTable, t: float, particle: int,
                      axis: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Cross-term weights and target-axis exponents for one marginal."""
        ov = self._axis_overlaps(species, t)
        ov = ov.copy()
        ov[:, :, particle, axis] = 1.0
        w = (np.prod(ov, axis=(-2, -1))
             * (np.conj(self._chis) @ self._chis.T)
             * np.conj(self._coefs)[:, None] * self._coefs[None, :])
        a, b, logA = self._triples(species, float(t))
        p = np.conj(a[:, particle, axis])[:, None] + a[None, :, particle, axis]
        q = np.conj(b[:, particle, axis])[:, None] + b[None, :, particle, axis]
        r = np.conj(logA[:, particle, axis])[:, None] + logA[None, :, particle, axis]
        return w, p, q, r

    def marginal_pdf(self, species: SpeciesTable, t: float, particle: int, axis: int,
                     xs: np.ndarray) -> np.ndarray:
        """Exact position density of one coordinate axis at time t."""
        w, p, q, r = self._pair_weights(species, t, particle, axis)
        xs = np.asarray(xs, dtype=float)[..., None, None]
        vals = np.sum(w * np.exp(-p * xs * xs + q * xs + r), axis=(-2, -1))
        return np.real(vals)

    def marginal_cdf(self, species: SpeciesTable, t: float, particle: int, axis: int,
                     xs: np.ndarray) -> np.ndarray:
        """Exact cumulative distribution of one coordinate axis at time t.

        Uses int_-inf^x exp(-p u^2 + q u + r) du =
        (1/2) sqrt(pi/p) exp(q^2/(4p) + r) (1 + erf(sqrt(p) x - q/(2 sqrt(p))))
        with principal square roots (Re p > 0); the erf argument is complex.
        """
        w, p, q, r = self._pair_weights(species, t, particle, axis)
        xs = np.asarray(xs, dtype=float)[..., None, None]
        sp = np.sqrt(p)
        pref = 0.5 * np.sqrt(np.pi / p) * np.exp(q * q / (4.0 * p) + r)
        vals = np.sum(w * pref * (1.0 + erf(sp * xs - q / (2.0 * sp))), axis=(-2, -1))
        return np.clip(np.real(vals), 0.0, 1.0)

    # sampling ----------------------------------------------------------------

    def sample_positions(self, species: SpeciesTable, t: float, m: int,
                         rng: np.random.Generator, batch: int = 8192) -> np.ndarray:
        """Draw m configurations from |psi_t|^2 / ||psi||^2 by rejection.

        Proposal: uniform mixture of the term densities |f_j|^2 (independent
        Gaussians per axis).  Cauchy-Schwarz gives the envelope
        |psi|^2 <= (sum_j |c_j|^2) * sum_j |f_j|^2, so acceptance is exact.
        """
        a, b, logA = self._triples(species, float(t))
        var = 1.0 / (4.0 * np.real(a))          # (J, N, d) per-axis variances
        mu = np.real(b) / (2.0 * np.real(a))    # (J, N, d) per-axis means
        big_k = float(np.sum(np.abs(self._coefs) ** 2))
        n, d, j_terms = self.n_particles, self.dim, self.n_terms
        out = np.empty((m, n, d))
        got = 0
        while got < m:
            pick = rng.integers(0, j_terms, size=batch)
            z = rng.standard_normal(size=(batch, n, d))
            pts = mu[pick] + np.sqrt(var[pick]) * z
            values, _ = self.values_and_gradients(species, pts, t, want_gradients=False)
            target = np.sum(np.abs(values) ** 2, axis=-1)
            x = pts[..., None, :, :]
            log_fj2 = 2.0 * np.real(np.sum(-a * x * x + b * x + logA, axis=(-2, -1)))
            envelope = big_k * np.sum(np.exp(log_fj2), axis=-1)
            u = rng.random(size=batch)
            keep = pts[u * envelope < target]
            take = min(m - got, keep.shape[0])
            out[got:got + take] = keep[:take]
            got += take
        return out


def _dummy_species(n: int) -> SpeciesTable:
    from ..core import uniform_species
    return uniform_species(n)


def product_state(centers, widths, wavevecs, spinors=None, phase: float = 0.0,
                  internal_dims: tuple[int, ...] | None = None) -> GaussianSuperposition:
    """Single Gaussian product term wrapped as a one-term superposition."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n = centers.shape[0]
    if spinors is None:
        dims = internal_dims or (1,) * n
        spinors = tuple(np.eye(k, dtype=complex)[0] for k in dims)
    term = GaussianProductState(centers=centers, widths=widths, wavevecs=wavevecs,
                                spinors=tuple(spinors), phase=phase)
    return GaussianSuperposition(((1.0 + 0.0j, term),))


def superpose(terms, normalize: bool = True) -> GaussianSuperposition:
    """Combine (coefficient, GaussianProductState) pairs into one state."""
    state = GaussianSuperposition(tuple(terms))
    return state.normalized() if normalize else state


def exchange_symmetrize(base: GaussianProductState, statistics: str = "boson",
                        blocks: tuple[tuple[int, ...], ...] | None = None,
                        normalize: bool = True) -> GaussianSuperposition:
    """(Anti)symmetrize a product term over particle exchanges.

    ``blocks`` lists the slot groups to symmetrize within (default: all slots
    as one group); ``statistics`` is "boson" or "fermion", or a sequence with
    one entry per block.  The result sums over every block permutation with
    the appropriate sign.
    """
    n = base.n_particles
    if blocks is None:
        blocks = (tuple(range(n)),)
    stats = [statistics] * len(blocks) if isinstance(statistics, str) else list(statistics)
    if len(stats) != len(blocks):
        raise ValueError("need one statistics entry per block")
    for s in stats:
        if s not in ("boson", "fermion"):
            raise ValueError(f"unknown statistics {s!r}")

    terms = []
    per_block = [list(itertools.permutations(range(len(blk)))) for blk in blocks]
    for combo in itertools.product(*per_block):
        image = list(range(n))
        coef = 1.0
        for blk, local, stat in zip(blocks, combo, stats):
            for pos, tgt in enumerate(local):
                image[blk[pos]] = blk[tgt]
            if stat == "fermion":
                coef *= permutation_sign(Permutation(tuple(local)))
        sigma = Permutation(tuple(image))
        terms.append((complex(coef), base.permuted(sigma)))
    state = GaussianSuperposition(tuple(terms))
    return state.normalized() if normalize else state
