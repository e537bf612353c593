"""Configuration-space primitives.

Configurations of N particles in d-dimensional space come in two flavours:

* :class:`LabeledConfiguration` -- an ordered N-tuple of points, one slot per
  particle label, i.e. an element of R^(d*N).
* :class:`UnorderedConfiguration` -- an N-point subset of R^d, stored as the
  canonical (lexicographically increasing) ordering of its points.

Permutations act on labeled configurations by moving the occupant of slot i
to slot sigma(i).  A :class:`Numbering` attaches the labels 1..N to the
points of an unordered configuration, which is how labeled representatives
are reconstructed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = [
    "MAX_ENUMERATION_N",
    "CoincidenceError",
    "SpeciesSlot",
    "SpeciesTable",
    "uniform_species",
    "LabeledConfiguration",
    "UnorderedConfiguration",
    "Permutation",
    "Numbering",
    "canonicalize",
    "apply_permutation",
    "permutation_sign",
    "enumerate_permutations",
]

# S_N enumeration guard: 8! = 40320 terms is the practical desk-scale ceiling.
MAX_ENUMERATION_N = 8


class CoincidenceError(ValueError):
    """Two particle positions coincide exactly; the point set is degenerate."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=float)
    if out is a:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SpeciesSlot:
    """Mass, internal dimension, and species tag of one particle slot."""

    mass: float
    internal_dim: int = 1
    tag: str = "particle"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive and finite, got {self.mass}")
        if int(self.internal_dim) < 1:
            raise ValueError(f"internal_dim must be >= 1, got {self.internal_dim}")


@dataclass(frozen=True)
class SpeciesTable:
    """Per-slot particle metadata plus the value of hbar in simulation units."""

    slots: tuple[SpeciesSlot, ...]
    hbar: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "slots", tuple(self.slots))
        if len(self.slots) < 1:
            raise ValueError("species table needs at least one particle slot")
        if not (math.isfinite(self.hbar) and self.hbar > 0):
            raise ValueError(f"hbar must be positive and finite, got {self.hbar}")

    @property
    def n_particles(self) -> int:
        return len(self.slots)

    @property
    def masses(self) -> np.ndarray:
        return np.array([s.mass for s in self.slots])

    @property
    def internal_dims(self) -> tuple[int, ...]:
        return tuple(s.internal_dim for s in self.slots)

    @property
    def internal_dim_total(self) -> int:
        return int(np.prod(self.internal_dims, dtype=np.int64))

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(s.tag for s in self.slots)

    def species_blocks(self) -> dict[str, tuple[int, ...]]:
        """Slot indices grouped by species tag, in order of first appearance."""
        blocks: dict[str, list[int]] = {}
        for i, slot in enumerate(self.slots):
            blocks.setdefault(slot.tag, []).append(i)
        return {tag: tuple(ix) for tag, ix in blocks.items()}

    def all_dims_equal(self) -> bool:
        return len(set(self.internal_dims)) == 1


def uniform_species(n: int, mass: float = 1.0, internal_dim: int = 1,
                    tag: str = "particle", hbar: float = 1.0) -> SpeciesTable:
    """Species table of n identical slots."""
    return SpeciesTable(tuple(SpeciesSlot(mass, internal_dim, tag) for _ in range(n)),
                        hbar=hbar)


@dataclass(frozen=True, eq=False)
class LabeledConfiguration:
    """Ordered N-tuple of points in R^d; slot i holds the position of particle i."""

    points: np.ndarray  # shape (N, d), read-only

    def __post_init__(self) -> None:
        pts = _readonly(np.atleast_2d(self.points))
        if pts.ndim != 2:
            raise ValueError(f"points must be an (N, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("configuration coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledConfiguration):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points))

    def __hash__(self) -> int:
        return hash((self.points.shape, self.points.tobytes()))

    def __repr__(self) -> str:
        return f"LabeledConfiguration({self.points.tolist()!r})"


def _lex_order(points: np.ndarray) -> np.ndarray:
    # np.lexsort uses the last key as primary; reverse so coordinate 0 leads.
    return np.lexsort(points.T[::-1])


def _has_duplicate_rows(points: np.ndarray) -> bool:
    order = _lex_order(points)
    sorted_pts = points[order]
    return bool(np.any(np.all(sorted_pts[1:] == sorted_pts[:-1], axis=1)))


@dataclass(frozen=True, eq=False)
class UnorderedConfiguration:
    """N-point subset of R^d in canonical (strictly lexicographic) order.

    Coincidence configurations are not representable: construction fails if
    two points are equal.
    """

    points: np.ndarray  # shape (N, d), read-only, strictly lex-increasing

    def __post_init__(self) -> None:
        pts = _readonly(np.atleast_2d(self.points))
        if pts.ndim != 2:
            raise ValueError(f"points must be an (N, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("configuration coordinates must be finite")
        for a in range(pts.shape[0] - 1):
            ta, tb = tuple(pts[a]), tuple(pts[a + 1])
            if ta == tb:
                raise CoincidenceError(f"coincident points at canonical index {a}: {ta}")
            if ta > tb:
                raise ValueError("points are not in canonical lexicographic order; "
                                 "use canonicalize() to build from unsorted points")
        object.__setattr__(self, "points", pts)

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def min_gap(self) -> float:
        """Smallest pairwise distance between the points."""
        pts = self.points
        if pts.shape[0] < 2:
            return math.inf
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        n = pts.shape[0]
        return float(np.min(dist[~np.eye(n, dtype=bool)]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UnorderedConfiguration):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points))

    def __hash__(self) -> int:
        return hash((self.points.shape, self.points.tobytes()))

    def __repr__(self) -> str:
        return f"UnorderedConfiguration({self.points.tolist()!r})"


@dataclass(frozen=True)
class Permutation:
    """Bijection of {0, .., N-1}; ``image[i]`` is where slot i is sent."""

    image: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "image", tuple(int(i) for i in self.image))
        n = len(self.image)
        if sorted(self.image) != list(range(n)):
            raise ValueError(f"not a bijection of 0..{n - 1}: {self.image}")

    @property
    def n(self) -> int:
        return len(self.image)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))

    @classmethod
    def transposition(cls, n: int, i: int, j: int) -> "Permutation":
        image = list(range(n))
        image[i], image[j] = image[j], image[i]
        return cls(tuple(image))

    def inverse(self) -> "Permutation":
        inv = [0] * self.n
        for i, img in enumerate(self.image):
            inv[img] = i
        return Permutation(tuple(inv))

    def compose(self, other: "Permutation") -> "Permutation":
        """Composition self o other: apply ``other`` first, then ``self``."""
        if self.n != other.n:
            raise ValueError("size mismatch in permutation composition")
        return Permutation(tuple(self.image[other.image[i]] for i in range(self.n)))

    def is_identity(self) -> bool:
        return all(i == img for i, img in enumerate(self.image))


@dataclass(frozen=True)
class Numbering:
    """Assignment of the labels 0..N-1 to the points of an unordered configuration.

    ``labels[a]`` is the label given to the a-th point in canonical order.
    Pairing with a configuration is positional: ops that consume a
    (configuration, numbering) pair check that the lengths match.
    """

    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(int(i) for i in self.labels))
        n = len(self.labels)
        if sorted(self.labels) != list(range(n)):
            raise ValueError(f"not a bijection onto 0..{n - 1}: {self.labels}")

    @property
    def n(self) -> int:
        return len(self.labels)

    def to_labeled(self, q: UnorderedConfiguration) -> LabeledConfiguration:
        """Labeled representative: the point with label i goes to slot i."""
        if q.n_particles != self.n:
            raise ValueError("numbering size does not match configuration")
        out = np.empty_like(q.points)
        out[list(self.labels)] = q.points
        return LabeledConfiguration(out)


def canonicalize(c: LabeledConfiguration) -> tuple[UnorderedConfiguration, Numbering]:
    """Project a labeled configuration to its unordered point set.

    Returns the canonically ordered configuration together with the numbering
    that remembers each point's original slot, so
    ``numbering.to_labeled(unordered)`` restores the input exactly.

    Raises :class:`CoincidenceError` if two points coincide.
    """
    pts = c.points
    if _has_duplicate_rows(pts):
        raise CoincidenceError("two particle positions coincide exactly")
    order = _lex_order(pts)
    q = UnorderedConfiguration(pts[order])
    return q, Numbering(tuple(int(i) for i in order))


def apply_permutation(sigma: Permutation, c: LabeledConfiguration) -> LabeledConfiguration:
    """Permuted configuration: slot sigma(i) of the output holds slot i of the input."""
    if sigma.n != c.n_particles:
        raise ValueError(f"permutation size {sigma.n} does not match "
                         f"configuration size {c.n_particles}")
    out = np.empty_like(c.points)
    out[list(sigma.image)] = c.points
    return LabeledConfiguration(out)


def permutation_sign(sigma: Permutation) -> int:
    """Sign of the permutation: -1 to the number of transpositions."""
    seen = [False] * sigma.n
    sign = 1
    for start in range(sigma.n):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = sigma.image[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def enumerate_permutations(n: int, max_n: int = MAX_ENUMERATION_N) -> Iterator[Permutation]:
    """Yield all n! permutations of n elements exactly once.

    Refuses n > max_n (default 8) to guard against factorial blow-up.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if n > max_n:
        raise ValueError(f"n = {n} exceeds the enumeration bound max_n = {max_n}; "
                         f"{n}! permutations is beyond desk scale")
    for image in itertools.permutations(range(n)):
        yield Permutation(image)
