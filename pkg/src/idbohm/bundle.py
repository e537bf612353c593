"""The vector bundle over unordered configuration space.

The fiber at q is the orthogonal direct sum of N! copies of the internal
space W, one copy per numbering (bijection from the points of q to the
labels 0..N-1).  A wave function on labeled space lifts fiberwise: the
component at numbering nu is the value at the labeled representative that
puts the point with label i into slot i.  Conversely, restricting a fiber
element to a labeled configuration picks the component of the numbering
induced by the slot order, which inverts the lift exactly.

Parallel transport follows the points of a discretized path by
nearest-point matching and relabels components accordingly: values are
untouched, so transport is exactly norm-preserving and flat (the relabeling
depends only on the endpoint matching).  Exchange loops act by the induced
permutation; on the spinless fermion subbundle that is multiplication by the
permutation sign.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    LabeledConfiguration,
    Numbering,
    Permutation,
    SpeciesTable,
    UnorderedConfiguration,
    canonicalize,
    permutation_sign,
)
from .dynamics import NodeError
from .wavefunction import WaveFunction

__all__ = [
    "PathMatchingError",
    "FiberElement",
    "PathInNRd",
    "WaveFunctionSection",
    "all_numberings",
    "lift",
    "restrict",
    "permutation_representation",
    "project_boson",
    "project_fermion",
    "project_species",
    "species_projector_matrix",
    "subbundle_residual",
    "path_from_points",
    "parallel_transport",
    "holonomy_sign_test",
    "phi_velocity",
    "phi_schrodinger_residual",
    "mixed_species_subbundle_check",
    "transform_norm_check",
    "fiber_to_json_dict",
    "fiber_from_json_dict",
    "TransformNormResult",
    "SubbundleCheck",
]

SUBBUNDLE_TOLERANCE = 1e-10


class PathMatchingError(ValueError):
    """A path step is too coarse for an unambiguous nearest-point matching."""


@lru_cache(maxsize=16)
def all_numberings(n: int) -> tuple[tuple[int, ...], ...]:
    """All label assignments (canonical index -> label), in lexicographic order."""
    return tuple(itertools.permutations(range(n)))


@lru_cache(maxsize=16)
def _numbering_index(n: int) -> dict[tuple[int, ...], int]:
    return {lab: r for r, lab in enumerate(all_numberings(n))}


@dataclass(frozen=True, eq=False)
class FiberElement:
    """Element of the fiber at ``base``: one spinor per numbering.

    ``components[r]`` belongs to the numbering ``all_numberings(N)[r]``.  The
    squared norm is the plain sum of squared component norms (the direct sum
    is orthogonal).
    """

    base: UnorderedConfiguration
    components: np.ndarray  # (N!, W) complex
    species: SpeciesTable

    def __post_init__(self) -> None:
        comp = np.ascontiguousarray(self.components, dtype=complex)
        n = self.base.n_particles
        expected = (math.factorial(n), self.species.internal_dim_total)
        if comp.shape != expected:
            raise ValueError(f"components shape {comp.shape}, expected {expected}")
        comp.flags.writeable = False
        object.__setattr__(self, "components", comp)

    @property
    def n_particles(self) -> int:
        return self.base.n_particles

    def component(self, nu: Numbering) -> np.ndarray:
        return self.components[_numbering_index(self.n_particles)[nu.labels]]

    def norm(self) -> float:
        return float(np.linalg.norm(self.components))

    def with_components(self, comp: np.ndarray) -> "FiberElement":
        return FiberElement(self.base, comp, self.species)


def _representatives(q: UnorderedConfiguration) -> np.ndarray:
    """Labeled representatives for every numbering, shape (N!, N, d)."""
    n = q.n_particles
    labs = np.array(all_numberings(n), dtype=np.int64)     # (P, N)
    out = np.empty((labs.shape[0], n, q.dim))
    out[np.arange(labs.shape[0])[:, None], labs] = q.points[None, :, :]
    return out


def lift(psi: WaveFunction, q: UnorderedConfiguration) -> FiberElement:
    """Fiber element with component at nu equal to psi at the nu-representative."""
    reps = _representatives(q)
    values, _ = psi.values_and_gradients(reps, want_gradients=False)
    return FiberElement(q, values, psi.species)


def _induced_labels(e: FiberElement, c: LabeledConfiguration) -> tuple[int, ...]:
    """Labels of the numbering nu(c_i) = i, or raise on point-set mismatch."""
    if c.n_particles != e.n_particles:
        raise ValueError("configuration size does not match fiber base")
    slot_of = {pt.tobytes(): i for i, pt in enumerate(np.ascontiguousarray(c.points))}
    if len(slot_of) != c.n_particles:
        raise ValueError("labeled configuration has coincident points")
    labels = []
    for a in range(e.n_particles):
        key = np.ascontiguousarray(e.base.points[a]).tobytes()
        if key not in slot_of:
            raise ValueError("configuration point set does not equal the fiber base")
        labels.append(slot_of[key])
    return tuple(labels)


def restrict(e: FiberElement, c: LabeledConfiguration) -> np.ndarray:
    """Component of the numbering induced by c's slot order; inverts lift."""
    labels = _induced_labels(e, c)
    return e.components[_numbering_index(e.n_particles)[labels]]


# permutation representation and subbundle projectors ---------------------------


def _check_rep_compatible(sigma: Permutation, dims: tuple[int, ...]) -> None:
    for t in range(sigma.n):
        if dims[sigma.image[t]] != dims[t]:
            raise ValueError("unequal internal dimensions: the permutation moves "
                             f"slot dims {dims} incompatibly")


@lru_cache(maxsize=256)
def _rep_index_array(image: tuple[int, ...], dims: tuple[int, ...]) -> np.ndarray:
    """Flat gather indices realizing the tensor-slot permutation on W.

    With inverse axes, transposing arange(W) gives B[(j)] = flat position of
    (j_sigma(0), ..), so gathering with B.ravel() moves slot i to slot
    sigma(i) and composes homomorphically.
    """
    w = int(np.prod(dims))
    inverse = tuple(int(i) for i in np.argsort(np.asarray(image)))
    flat = np.arange(w).reshape(dims)
    return np.transpose(flat, axes=inverse).reshape(-1)


def permutation_representation(sigma: Permutation, spinor: np.ndarray,
                               dims: tuple[int, ...]) -> np.ndarray:
    """Tensor-slot action of sigma on W = C^k1 x .. x C^kN.

    The component at multi-index (j_1, .., j_N) of the output is the input
    component at (j_sigma(1), .., j_sigma(N)); on product vectors this moves
    the factor in slot i to slot sigma(i), and R_sigma R_tau = R_(sigma tau).
    Slot dimensions must be compatible with the move (equal dims suffice).
    """
    dims = tuple(int(k) for k in dims)
    spinor = np.asarray(spinor)
    if spinor.shape[-1] != int(np.prod(dims)):
        raise ValueError(f"spinor length {spinor.shape[-1]} does not match dims {dims}")
    _check_rep_compatible(sigma, dims)
    idx = _rep_index_array(sigma.image, dims)
    return spinor[..., idx]


def _group_elements(n: int, blocks: tuple[tuple[int, ...], ...],
                    stats: tuple[str, ...]) -> list[tuple[Permutation, int]]:
    """Block-embedded permutations with their statistics sign."""
    per_block = [list(itertools.permutations(range(len(blk)))) for blk in blocks]
    out = []
    for combo in itertools.product(*per_block):
        image = list(range(n))
        sign = 1
        for blk, local, stat in zip(blocks, combo, stats):
            for pos, tgt in enumerate(local):
                image[blk[pos]] = blk[tgt]
            if stat == "fermion":
                sign *= permutation_sign(Permutation(tuple(local)))
        out.append((Permutation(tuple(image)), sign))
    return out


def _apply_group_average(e: FiberElement, elements) -> FiberElement:
    """(P e)_nu = (1/|G|) sum_g sign(g) R_g e_(g^-1 o nu)."""
    n = e.n_particles
    dims = e.species.internal_dims
    labs = np.array(all_numberings(n), dtype=np.int64)
    index = _numbering_index(n)
    acc = np.zeros_like(e.components)
    for g, sign in elements:
        ginv = np.array(g.inverse().image, dtype=np.int64)
        rep_idx = _rep_index_array(g.image, dims)
        src_rows = np.array([index[tuple(ginv[lab])] for lab in labs], dtype=np.int64)
        acc += sign * e.components[src_rows][:, rep_idx]
    return e.with_components(acc / len(elements))


def _full_group(n: int, statistics: str) -> list[tuple[Permutation, int]]:
    return _group_elements(n, (tuple(range(n)),), (statistics,))


def project_boson(e: FiberElement) -> FiberElement:
    """Orthogonal projection onto the exchange-symmetric subbundle."""
    if not e.species.all_dims_equal():
        raise ValueError("boson projector needs equal internal dimensions")
    return _apply_group_average(e, _full_group(e.n_particles, "boson"))


def project_fermion(e: FiberElement) -> FiberElement:
    """Orthogonal projection onto the sign-twisted (antisymmetric) subbundle."""
    if not e.species.all_dims_equal():
        raise ValueError("fermion projector needs equal internal dimensions")
    return _apply_group_average(e, _full_group(e.n_particles, "fermion"))


def _species_elements(species: SpeciesTable, statistics: dict[str, str]):
    blocks = species.species_blocks()
    for tag in blocks:
        if tag not in statistics:
            raise ValueError(f"no statistics given for species {tag!r}")
        if statistics[tag] not in ("boson", "fermion"):
            raise ValueError(f"unknown statistics {statistics[tag]!r}")
        dims = {species.internal_dims[i] for i in blocks[tag]}
        if len(dims) > 1:
            raise ValueError(f"species {tag!r} has unequal internal dimensions")
    return _group_elements(species.n_particles, tuple(blocks.values()),
                           tuple(statistics[tag] for tag in blocks))


def project_species(e: FiberElement, statistics: dict[str, str]) -> FiberElement:
    """Projection onto the per-species exchange subbundle."""
    return _apply_group_average(e, _species_elements(e.species, statistics))


def subbundle_residual(e: FiberElement, projected: FiberElement) -> float:
    nrm = e.norm()
    if nrm == 0.0:
        return 0.0
    return float(np.linalg.norm(e.components - projected.components)) / nrm


def species_projector_matrix(species: SpeciesTable, statistics: dict[str, str]) -> np.ndarray:
    """Explicit matrix of the species projector on the N!*W fiber."""
    n = species.n_particles
    dims = species.internal_dims
    w = species.internal_dim_total
    labs = np.array(all_numberings(n), dtype=np.int64)
    index = _numbering_index(n)
    p_fact = labs.shape[0]
    mat = np.zeros((p_fact * w, p_fact * w))
    elements = _species_elements(species, statistics)
    for g, sign in elements:
        ginv = np.array(g.inverse().image, dtype=np.int64)
        rep_idx = _rep_index_array(g.image, dims)
        for r, lab in enumerate(labs):
            src = index[tuple(ginv[lab])]
            for wi in range(w):
                mat[r * w + wi, src * w + rep_idx[wi]] += sign
    return mat / len(elements)


# paths and parallel transport ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathInNRd:
    """Discretized path: configurations plus the per-step point matchings.

    ``matchings[s][a]`` is the index (in canonical order of configs[s+1]) of
    the point that the a-th point of configs[s] moves to.
    """

    configs: tuple[UnorderedConfiguration, ...]
    matchings: tuple[np.ndarray, ...]

    @property
    def start(self) -> UnorderedConfiguration:
        return self.configs[0]

    @property
    def end(self) -> UnorderedConfiguration:
        return self.configs[-1]

    def end_to_end_matching(self) -> np.ndarray:
        n = self.start.n_particles
        total = np.arange(n)
        for m in self.matchings:
            total = m[total]
        return total

    def is_loop(self) -> bool:
        return bool(np.array_equal(self.start.points, self.end.points))

    def reversed(self) -> "PathInNRd":
        inv_matchings = tuple(np.argsort(m) for m in reversed(self.matchings))
        return PathInNRd(tuple(reversed(self.configs)), inv_matchings)

    def concatenated(self, other: "PathInNRd") -> "PathInNRd":
        if not np.array_equal(self.end.points, other.start.points):
            raise ValueError("paths do not share an endpoint")
        return PathInNRd(self.configs + other.configs[1:],
                         self.matchings + other.matchings)


def _match_step(qa: UnorderedConfiguration, qb: UnorderedConfiguration) -> np.ndarray:
    """Nearest-point matching validated by the half-gap criterion."""
    gap = min(qa.min_gap(), qb.min_gap())
    diff = qa.points[:, None, :] - qb.points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    match = np.argmin(dist, axis=1)
    moved = dist[np.arange(len(match)), match]
    if np.any(moved >= 0.5 * gap):
        raise PathMatchingError(
            f"path step too coarse: a point moved {float(np.max(moved)):.3g}, "
            f"at least half the minimum gap {gap:.3g}")
    if len(set(match.tolist())) != len(match):
        raise PathMatchingError("nearest-point matching is not a bijection")
    return match.astype(np.int64)


def path_from_points(point_sequences) -> PathInNRd:
    """Build a path from a sequence of (N, d) point arrays.

    Each array is canonicalized; consecutive configurations are matched by
    nearest points, which must move less than half the minimum inter-point
    gap per step (guaranteeing the matching is the continuous one).
    """
    configs = []
    for pts in point_sequences:
        q, _ = canonicalize(LabeledConfiguration(np.atleast_2d(pts)))
        configs.append(q)
    if len(configs) < 2:
        raise ValueError("a path needs at least two samples")
    matchings = tuple(_match_step(configs[s], configs[s + 1])
                      for s in range(len(configs) - 1))
    return PathInNRd(tuple(configs), matchings)


def parallel_transport(e: FiberElement, path: PathInNRd) -> FiberElement:
    """Carry a fiber element along a path by composing the point matchings.

    Component values are untouched; only their numbering indices are
    relabeled, so the norm is exactly preserved and transport along
    concatenated paths composes.
    """
    if not np.array_equal(e.base.points, path.start.points):
        raise ValueError("path does not start at the base of the fiber element")
    total = path.end_to_end_matching()
    n = e.n_particles
    labs = all_numberings(n)
    index = _numbering_index(n)
    out = np.empty_like(e.components)
    for r, lab in enumerate(labs):
        lab_end = np.empty(n, dtype=np.int64)
        lab_end[total] = np.array(lab, dtype=np.int64)
        out[index[tuple(lab_end)]] = e.components[r]
    return FiberElement(path.end, out, e.species)


def holonomy_sign_test(path: PathInNRd, e: FiberElement,
                       tolerance: float = SUBBUNDLE_TOLERANCE) -> int:
    """Scalar relating a fermion fiber element to its loop transport.

    Requires a spinless (W = 1 per slot) element of the fermion subbundle and
    a closed path; returns +1 or -1.
    """
    if not path.is_loop():
        raise ValueError("holonomy needs a closed path")
    if e.species.internal_dim_total != 1:
        raise ValueError("holonomy sign test is defined for spinless fibers")
    res = subbundle_residual(e, project_fermion(e))
    if res > tolerance:
        raise ValueError(f"element is not in the fermion subbundle (residual {res:.2e})")
    transported = parallel_transport(e, path)
    r0 = int(np.argmax(np.abs(e.components[:, 0])))
    scalar = transported.components[r0, 0] / e.components[r0, 0]
    if np.max(np.abs(transported.components - scalar * e.components)) > \
            tolerance * max(e.norm(), 1e-300):
        raise ValueError("transported element is not a scalar multiple of the input")
    sign = int(round(scalar.real))
    if abs(scalar - sign) > 1e-9 or sign not in (-1, 1):
        raise ValueError(f"holonomy scalar {scalar} is not a sign")
    return sign


# dynamics in fiber form -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WaveFunctionSection:
    """Bundle cross-section realized by lazily lifting a wave function."""

    psi: WaveFunction

    def fiber(self, q: UnorderedConfiguration) -> FiberElement:
        return lift(self.psi, q)

    def velocity(self, q: UnorderedConfiguration, eps_node: float = 0.0) -> np.ndarray:
        return phi_velocity(self, q, eps_node=eps_node)


def phi_velocity(section: WaveFunctionSection, q: UnorderedConfiguration,
                 eps_node: float = 0.0) -> np.ndarray:
    """Velocity of each point of q from the fiber components, canonical order.

    Sums over numberings: the point with label i contributes the label-i
    slot gradient weighted by hbar/m_i, normalized by the squared fiber norm.
    Derivatives are routed through the underlying labeled-space backend.
    """
    psi = section.psi
    reps = _representatives(q)                                    # (P, N, d)
    values, grads = psi.values_and_gradients(reps)                # (P,W), (P,N,d,W)
    labs = np.array(all_numberings(q.n_particles), dtype=np.int64)
    idx = np.broadcast_to(labs[:, :, None, None], grads.shape)
    slot_grads = np.take_along_axis(grads, idx, axis=1)
    imng = np.imag(np.einsum("pw,pndw->pnd", np.conj(values), slot_grads))
    weights = psi.species.hbar / psi.species.masses[labs]          # (P, N)
    num = np.sum(weights[:, :, None] * imng, axis=0)               # (N, d)
    den = float(np.sum(np.abs(values) ** 2))
    if not den > eps_node:
        raise NodeError(f"squared fiber norm {den:.3e} is below the node guard")
    return num / den


def phi_schrodinger_residual(psi: WaveFunction, q: UnorderedConfiguration,
                             nu: Numbering, dt: float,
                             mass_numbering: Numbering | None = None) -> float:
    """Relative residual of the fiber-component evolution equation.

    Compares the centered time difference of the nu-component of the lift
    (over +-dt around psi.time + dt) against
    -(i/hbar) [ -sum_a hbar^2/(2 m_(nu(a))) Lap_a + V ] applied to the
    component, with Laplacians taken spectrally.  ``mass_numbering`` swaps in
    a wrong label-to-mass assignment as a deliberate negative control.
    """
    if psi.is_analytic:
        raise ValueError("the residual check needs the grid backend (spectral Laplacians)")
    rep = nu.to_labeled(q)
    psi1 = psi.evolve(dt)
    psi2 = psi1.evolve(dt)
    v0 = psi.evaluate(rep)
    v1 = psi1.evaluate(rep)
    v2 = psi2.evaluate(rep)
    dphi_dt = (v2 - v0) / (2.0 * dt)

    hbar = psi.species.hbar
    masses = psi.species.masses
    labels = np.array((mass_numbering or nu).labels, dtype=np.int64)
    # canonical point a sits in slot nu(a) of the representative; its
    # Laplacian block is the slot's, its mass the label's
    slot_of_point = np.array(nu.labels, dtype=np.int64)
    laps = psi1.state.laplacian_points(rep.points[None])[0]        # (N, W)
    kinetic = np.zeros_like(v1)
    for a in range(q.n_particles):
        kinetic += -(hbar ** 2) / (2.0 * masses[labels[a]]) * laps[slot_of_point[a]]
    pot = _potential_apply(psi, rep, v1)
    rhs = (kinetic + pot) / (1j * hbar)
    scale = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(dphi_dt)), 1e-300)
    return float(np.linalg.norm(dphi_dt - rhs)) / scale


def _potential_apply(psi: WaveFunction, c: LabeledConfiguration,
                     value: np.ndarray) -> np.ndarray:
    # interpolate the nodal product V psi (not V and psi separately) so the
    # interpolation error cancels against the other terms of the equation
    geo = psi.state.geometry
    if geo.potential is None:
        return np.zeros_like(value)
    if geo.is_matrix_potential:
        product = np.einsum("...ij,...j->...i", geo.potential, psi.state.amplitudes)
    else:
        product = geo.potential[..., None] * psi.state.amplitudes
    return psi.state._interpolate(product, c.points[None])[0]


# transform checks -------------------------------------------------------------------


@dataclass(frozen=True)
class TransformNormResult:
    ratio: float
    discrepancy: float
    stderr: float
    samples: int


def transform_norm_check(psi: WaveFunction, samples: int, seed: int = 0) -> TransformNormResult:
    """Monte Carlo comparison of the fiber-side and labeled-side squared norms.

    Draws configurations from |psi|^2 and averages
    (sum_sigma rho(sigma Q)) / (N! rho(Q)), which estimates the unordered
    integral of the squared fiber norm (fundamental-domain convention, one
    1/N! per labeled overcount) divided by the labeled norm; the transform is
    unitary, so the ratio is 1 up to sampling error.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF1BE)))
    pts = psi.sample_positions(samples, rng)
    n = psi.n_particles
    invs = np.argsort(np.array(list(itertools.permutations(range(n)))), axis=1)
    perm_cfg = pts[:, invs, :]
    values, _ = psi.values_and_gradients(perm_cfg, want_gradients=False)
    rho_p = np.sum(np.abs(values) ** 2, axis=-1)                   # (M, P)
    est = rho_p.sum(axis=1) / (math.factorial(n) * rho_p[:, 0])
    ratio = float(np.mean(est))
    stderr = float(np.std(est, ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return TransformNormResult(ratio=ratio, discrepancy=abs(ratio - 1.0),
                               stderr=stderr, samples=samples)


def mixed_species_subbundle_check(psi: WaveFunction, q: UnorderedConfiguration,
                                  statistics: dict[str, str],
                                  tolerance: float = SUBBUNDLE_TOLERANCE):
    """Verify the per-species exchange constraint of the lift and count dimensions.

    Returns a :class:`SubbundleCheck` with the constraint residual of
    lift(psi, q), the projector rank, and the expected dimension
    N!/(N_1! .. N_l!) * k_1^N_1 .. k_l^N_l.
    """
    e = lift(psi, q)
    proj = project_species(e, statistics)
    residual = subbundle_residual(e, proj)
    mat = species_projector_matrix(psi.species, statistics)
    rank = int(np.linalg.matrix_rank(mat, tol=1e-9))
    blocks = psi.species.species_blocks()
    expected = math.factorial(psi.species.n_particles)
    for tag, slots in blocks.items():
        expected //= math.factorial(len(slots))
        expected *= psi.species.internal_dims[slots[0]] ** len(slots)
    ok = residual <= tolerance and rank == expected
    return SubbundleCheck(ok=ok, residual=residual, rank=rank, expected_dim=expected)


@dataclass(frozen=True)
class SubbundleCheck:
    ok: bool
    residual: float
    rank: int
    expected_dim: int


# serialization ------------------------------------------------------------------------


def fiber_to_json_dict(e: FiberElement) -> dict:
    """JSON form: base points in canonical order; components keyed by the
    numbering written as a 1-based label sequence over the canonical order."""
    comp = {}
    for r, lab in enumerate(all_numberings(e.n_particles)):
        key = ",".join(str(l + 1) for l in lab)
        comp[key] = [[float(z.real), float(z.imag)] for z in e.components[r]]
    return {"base": e.base.points.tolist(), "components": comp}


def fiber_from_json_dict(data: dict, species: SpeciesTable) -> FiberElement:
    base = UnorderedConfiguration(np.asarray(data["base"], dtype=float))
    n = base.n_particles
    comp = np.zeros((math.factorial(n), species.internal_dim_total), dtype=complex)
    index = _numbering_index(n)
    for key, entries in data["components"].items():
        lab = tuple(int(s) - 1 for s in key.split(","))
        comp[index[lab]] = [complex(re, im) for re, im in entries]
    return FiberElement(base, comp, species)


def fiber_to_json(e: FiberElement, path) -> None:
    with open(path, "w") as fh:
        json.dump(fiber_to_json_dict(e), fh)
