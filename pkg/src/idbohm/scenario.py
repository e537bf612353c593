"""Scenario files: parsing, validation, defaults, and wave-function building.

A scenario is one YAML document (key-value tree).  The full schema with every
default is documented in the README; unknown keys are rejected so typos fail
loudly.  The same ``state.terms`` description feeds both backends: the
analytic backend uses it directly, the grid backend samples it onto the grid
nodes at t = 0.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from .core import SpeciesSlot, SpeciesTable
from .dynamics import VelocityLaw
from .wavefunction import (
    GaussianProductState,
    GaussianSuperposition,
    WaveFunction,
    exchange_symmetrize,
    grid_from_analytic,
    superpose,
)

__all__ = ["ScenarioError", "Scenario", "load_scenario", "parse_scenario",
           "scenario_hash", "DEFAULTS"]


class ScenarioError(ValueError):
    """Scenario file is malformed; the message carries location information."""


DEFAULTS: dict[str, Any] = {
    "description": "",
    "dimension": 1,
    "hbar": 1.0,
    "state": {"backend": "gaussian", "symmetrize": "none"},
    "grid": {"points_per_axis": 128, "box_length": 40.0,
             "potential": {"kind": "none"}},
    "ensemble": {"size": 1000, "seed": 0, "observation_times": [1.0]},
    "integrator": {"tolerance": None, "initial_step": None,
                   "wave_step": 1e-3, "max_halvings": 20},
    "laws": ["standard", "identity"],
    "checks": {"equivariance": False, "marginal_identity": False,
               "strong_invariance": False, "disjoint_reduction": False,
               "reduction_identity": False, "continuity_residual": False},
    "tolerances": {"alpha": 0.01, "reference_samples": 1_000_000,
                   "disjoint_reduction_rtol": 1e-8,
                   "strong_invariance_factor": 10.0,
                   "strong_invariance_time": 1.0,
                   "reduction_limit": 1e-10,
                   "continuity_limit": 1e-3, "continuity_dt": 1e-3},
    "output": {"trajectory_files": 16, "figures": True},
}

_KNOWN_TOP = {"name", "description", "dimension", "hbar", "species", "state",
              "grid", "ensemble", "integrator", "laws", "checks", "tolerances",
              "output"}


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ScenarioError(f"{where}: {msg}")


def _merged(defaults: dict, given: dict | None, where: str) -> dict:
    given = given or {}
    _require(isinstance(given, dict), where, f"expected a mapping, got {type(given).__name__}")
    unknown = set(given) - set(defaults)
    _require(not unknown, where, f"unknown keys {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            out[key] = _merged(default, given.get(key), f"{where}.{key}")
        else:
            out[key] = given.get(key, default)
    return out


@dataclass(frozen=True)
class Scenario:
    """Validated scenario: species, state description, run plan."""

    name: str
    description: str
    dimension: int
    species: SpeciesTable
    backend: str
    terms: tuple[dict, ...]
    symmetrize: Any
    grid: dict
    ensemble: dict
    integrator: dict
    laws: tuple[VelocityLaw, ...]
    checks: dict
    tolerances: dict
    output: dict
    effective: dict = field(repr=False)

    @property
    def n_particles(self) -> int:
        return self.species.n_particles

    def build_analytic_state(self) -> GaussianSuperposition:
        states = []
        for term in self.terms:
            packets = term["packets"]
            centers = np.array([p["center"] for p in packets], dtype=float)
            widths = np.array([p["width"] for p in packets], dtype=float)
            wavevecs = np.array([p.get("wavevec", [0.0] * self.dimension)
                                 for p in packets], dtype=float)
            spinors = []
            for i, p in enumerate(packets):
                k_i = self.species.internal_dims[i]
                spin = p.get("spinor")
                if spin is None:
                    vec = np.zeros(k_i, dtype=complex)
                    vec[0] = 1.0
                else:
                    vec = np.array([complex(re, im) for re, im in spin])
                spinors.append(vec)
            coef = term.get("coefficient", [1.0, 0.0])
            base = GaussianProductState(centers=centers, widths=widths,
                                        wavevecs=wavevecs, spinors=tuple(spinors),
                                        phase=float(term.get("phase", 0.0)))
            states.append((complex(coef[0], coef[1]), base))

        sym = self.symmetrize
        if sym == "none":
            return superpose(states)
        _require(len(states) == 1, "state.symmetrize",
                 "symmetrization takes a single product term")
        base = states[0][1]
        if sym in ("boson", "fermion"):
            return exchange_symmetrize(base, sym)
        blocks = self.species.species_blocks()
        stats = tuple(sym[tag] for tag in blocks)
        return exchange_symmetrize(base, stats, blocks=tuple(blocks.values()))

    def build_potential(self, geometry) -> np.ndarray | None:
        spec = self.grid["potential"]
        kind = spec["kind"]
        if kind == "none":
            return None
        pts = geometry.point_grid()  # (n^axes, N, d)
        if kind == "harmonic":
            omega = float(spec.get("omega", 1.0))
            center = np.asarray(spec.get("center", [geometry.length / 2.0] * self.dimension))
            masses = self.species.masses
            v = 0.5 * omega ** 2 * np.sum(masses[None, :, None] * (pts - center) ** 2,
                                          axis=(1, 2))
            return v.reshape(geometry.grid_shape)
        if kind == "expression":
            expr = spec.get("expression")
            _require(isinstance(expr, str), "grid.potential.expression",
                     "expression potentials need an 'expression' string")
            names = {f"q{i}_{a}": pts[:, i, a]
                     for i in range(self.n_particles) for a in range(self.dimension)}
            names["np"] = np
            v = eval(expr, {"__builtins__": {}}, names)  # scenario files are trusted input
            v = np.broadcast_to(np.asarray(v, dtype=float), (pts.shape[0],))
            return v.reshape(geometry.grid_shape)
        raise ScenarioError(f"grid.potential.kind: unknown kind {kind!r}")

    def build_wavefunction(self) -> WaveFunction:
        analytic = self.build_analytic_state()
        if self.backend == "gaussian":
            return WaveFunction(self.species, analytic, 0.0)
        from .wavefunction import GridGeometry
        n = int(self.grid["points_per_axis"])
        length = float(self.grid["box_length"])
        probe = GridGeometry(self.species, self.dimension, n, length)
        state = grid_from_analytic(self.species, analytic, 0.0, self.dimension,
                                   n, length, potential=self.build_potential(probe))
        return WaveFunction(self.species, state, 0.0)

    def ensemble_spec(self, law: VelocityLaw, seed_override: int | None = None):
        from .ensemble import EnsembleSpec
        seed = self.ensemble["seed"] if seed_override is None else seed_override
        return EnsembleSpec(size=int(self.ensemble["size"]), seed=int(seed), law=law,
                            observation_times=tuple(self.ensemble["observation_times"]))

    def integrator_tolerance(self, psi: WaveFunction) -> float:
        tol = self.integrator["tolerance"]
        if tol is not None:
            return float(tol)
        return 1e-8 if psi.is_analytic else 1e-5


def parse_scenario(data: dict, source: str = "<memory>") -> Scenario:
    _require(isinstance(data, dict), source, "scenario must be a mapping")
    unknown = set(data) - _KNOWN_TOP
    _require(not unknown, source, f"unknown top-level keys {sorted(unknown)}")
    _require("name" in data and isinstance(data["name"], str), source,
             "scenario needs a 'name' string")
    _require("species" in data and isinstance(data["species"], list) and data["species"],
             source, "scenario needs a non-empty 'species' list")
    _require("state" in data and isinstance(data["state"], dict), source,
             "scenario needs a 'state' mapping")

    dim = int(data.get("dimension", DEFAULTS["dimension"]))
    _require(dim in (1, 2, 3), "dimension", f"space dimension must be 1, 2 or 3, got {dim}")
    hbar = float(data.get("hbar", DEFAULTS["hbar"]))

    slots = []
    for k, s in enumerate(data["species"]):
        where = f"species[{k}]"
        _require(isinstance(s, dict) and "mass" in s, where, "needs a 'mass'")
        unknown = set(s) - {"mass", "internal_dim", "tag"}
        _require(not unknown, where, f"unknown keys {sorted(unknown)}")
        slots.append(SpeciesSlot(mass=float(s["mass"]),
                                 internal_dim=int(s.get("internal_dim", 1)),
                                 tag=str(s.get("tag", "particle"))))
    species = SpeciesTable(tuple(slots), hbar=hbar)

    state_in = dict(data["state"])
    terms_in = state_in.pop("terms", None)
    _require(isinstance(terms_in, list) and terms_in, "state.terms",
             "needs a non-empty list of product terms")
    state = _merged(DEFAULTS["state"], state_in, "state")
    _require(state["backend"] in ("gaussian", "grid"), "state.backend",
             f"unknown backend {state['backend']!r}")

    terms = []
    for j, term in enumerate(terms_in):
        where = f"state.terms[{j}]"
        _require(isinstance(term, dict) and "packets" in term, where, "needs 'packets'")
        unknown = set(term) - {"packets", "coefficient", "phase"}
        _require(not unknown, where, f"unknown keys {sorted(unknown)}")
        packets = term["packets"]
        _require(isinstance(packets, list) and len(packets) == species.n_particles,
                 where, f"needs one packet per particle ({species.n_particles})")
        for i, p in enumerate(packets):
            pwhere = f"{where}.packets[{i}]"
            _require(isinstance(p, dict), pwhere, "packet must be a mapping")
            unknown = set(p) - {"center", "width", "wavevec", "spinor"}
            _require(not unknown, pwhere, f"unknown keys {sorted(unknown)}")
            _require("center" in p and len(p["center"]) == dim, pwhere,
                     f"needs a {dim}-component 'center'")
            _require("width" in p and float(p["width"]) > 0, pwhere,
                     "needs a positive 'width'")
            if "wavevec" in p:
                _require(len(p["wavevec"]) == dim, pwhere,
                         f"'wavevec' needs {dim} components")
            if p.get("spinor") is not None:
                k_i = species.internal_dims[i]
                _require(len(p["spinor"]) == k_i, pwhere,
                         f"'spinor' needs {k_i} [re, im] pairs")
        if "coefficient" in term:
            _require(len(term["coefficient"]) == 2, where,
                     "'coefficient' is a [re, im] pair")
        terms.append(term)

    sym = state["symmetrize"]
    if isinstance(sym, dict):
        blocks = species.species_blocks()
        _require(set(sym) == set(blocks), "state.symmetrize",
                 f"needs one entry per species tag {sorted(blocks)}")
        for tag, s in sym.items():
            _require(s in ("boson", "fermion"), "state.symmetrize",
                     f"unknown statistics {s!r} for {tag!r}")
    else:
        _require(sym in ("none", "boson", "fermion"), "state.symmetrize",
                 f"unknown symmetrization {sym!r}")

    grid_in = dict(data.get("grid") or {})
    potential = dict(grid_in.pop("potential", DEFAULTS["grid"]["potential"]))
    grid = _merged({k: v for k, v in DEFAULTS["grid"].items() if k != "potential"},
                   grid_in, "grid")
    pot_kind = potential.get("kind", "none")
    allowed_pot_keys = {"none": {"kind"}, "harmonic": {"kind", "omega", "center"},
                        "expression": {"kind", "expression"}}
    _require(pot_kind in allowed_pot_keys, "grid.potential.kind",
             f"unknown kind {pot_kind!r}")
    unknown = set(potential) - allowed_pot_keys[pot_kind]
    _require(not unknown, "grid.potential", f"unknown keys {sorted(unknown)}")
    grid["potential"] = {"kind": pot_kind, **{k: potential[k] for k in sorted(potential)
                                              if k != "kind"}}

    ensemble = _merged(DEFAULTS["ensemble"], data.get("ensemble"), "ensemble")
    _require(int(ensemble["size"]) >= 1, "ensemble.size", "must be >= 1")
    times = list(ensemble["observation_times"])
    _require(all(b > a for a, b in zip(times, times[1:])) and times and times[0] > 0,
             "ensemble.observation_times", "must be positive and strictly increasing")

    integrator = _merged(DEFAULTS["integrator"], data.get("integrator"), "integrator")
    checks = _merged(DEFAULTS["checks"], data.get("checks"), "checks")
    tolerances = _merged(DEFAULTS["tolerances"], data.get("tolerances"), "tolerances")
    output = _merged(DEFAULTS["output"], data.get("output"), "output")

    laws_in = data.get("laws", DEFAULTS["laws"])
    _require(isinstance(laws_in, list) and laws_in, "laws", "needs a non-empty list")
    try:
        laws = tuple(VelocityLaw(l) for l in laws_in)
    except ValueError as exc:
        raise ScenarioError(f"laws: {exc}") from None

    if checks["continuity_residual"]:
        _require(state["backend"] == "grid", "checks.continuity_residual",
                 "needs the grid backend")

    effective = {
        "name": data["name"],
        "description": str(data.get("description", "")),
        "dimension": dim,
        "hbar": hbar,
        "species": [{"mass": s.mass, "internal_dim": s.internal_dim, "tag": s.tag}
                    for s in slots],
        "state": {**state, "terms": terms},
        "grid": grid,
        "ensemble": ensemble,
        "integrator": integrator,
        "laws": [l.value for l in laws],
        "checks": checks,
        "tolerances": tolerances,
        "output": output,
    }
    scenario = Scenario(
        name=data["name"], description=effective["description"], dimension=dim,
        species=species, backend=state["backend"], terms=tuple(terms),
        symmetrize=sym, grid=grid, ensemble=ensemble, integrator=integrator,
        laws=laws, checks=checks, tolerances=tolerances, output=output,
        effective=effective,
    )
    _validate_box(scenario)
    return scenario


def _validate_box(s: Scenario) -> None:
    if s.backend != "grid":
        return
    length = float(s.grid["box_length"])
    t_max = max(s.ensemble["observation_times"])
    hbar = s.species.hbar
    for term in s.terms:
        for i, p in enumerate(term["packets"]):
            width = float(p["width"])
            mass = s.species.masses[i]
            sigma_t = width * math.sqrt(1.0 + (hbar * t_max / (2 * mass * width ** 2)) ** 2)
            drift = hbar * np.linalg.norm(p.get("wavevec", [0.0])) * t_max / mass
            for x in p["center"]:
                margin = min(x, length - x) - drift
                if margin < 5.0 * sigma_t:
                    warnings.warn(
                        f"scenario {s.name!r}: packet {i} has {margin / sigma_t:.1f} "
                        f"sigma_t of box margin at t={t_max:g}; wrap-around may bite "
                        f"(5 sigma_t recommended)", stacklevel=3)


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario YAML file.

    YAML syntax errors surface with their line numbers; semantic errors name
    the offending key path.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{path}: YAML syntax error{loc}: "
                            f"{getattr(exc, 'problem', exc)}") from None
    try:
        return parse_scenario(data, source=str(path))
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def scenario_hash(s: Scenario) -> str:
    """Stable hash of the effective (defaults-applied) configuration tree."""
    canon = json.dumps(s.effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
