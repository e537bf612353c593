"""Acceptance gate: every criterion at its stated tolerance, one line each.

Run with ``pytest tests/test_acceptance.py -v -s`` (or rely on the summary
printed by each test).  Criteria 4 and 9 propagate 10^4-member ensembles and
take a couple of minutes together; everything else is seconds.
"""

import itertools
import math

import numpy as np
import pytest

from conftest import symmetric_pair_psi, symmetric_triple_psi
from idbohm.bundle import (
    WaveFunctionSection,
    holonomy_sign_test,
    lift,
    mixed_species_subbundle_check,
    parallel_transport,
    path_from_points,
    phi_schrodinger_residual,
    phi_velocity,
    restrict,
    species_projector_matrix,
    transform_norm_check,
)
from idbohm.core import (
    LabeledConfiguration,
    Numbering,
    Permutation,
    SpeciesSlot,
    SpeciesTable,
    canonicalize,
    uniform_species,
)
from idbohm.dynamics import (
    VelocityLaw,
    integrate_trajectory,
    standard_velocity,
    strong_permutation_invariance_check,
    symmetrized_velocity,
    symmetrized_velocity_labeled,
)
from idbohm.ensemble import (
    EnsembleSpec,
    equivariance_test,
    marginal_identity_test,
    propagate_ensemble,
)
from idbohm.wavefunction import (
    GaussianProductState,
    WaveFunction,
    exchange_symmetrize,
    grid_from_analytic,
    product_state,
)

TAU_ODE = 1e-8
MASS_RATIO = 206.8
EM = SpeciesTable((SpeciesSlot(1.0, tag="electron"),
                   SpeciesSlot(MASS_RATIO, tag="muon")))


def report(num: int, title: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} ({title}): {detail}")
    assert ok, f"criterion {num} failed: {detail}"


def overlap_psi() -> WaveFunction:
    return WaveFunction(EM, product_state([[0.0], [0.8]], [1.0, 1.0],
                                          [[0.4], [-0.1]]))


def test_criterion_01_reduction_identity():
    rng = np.random.default_rng(101)
    worst = 0.0
    cases = [symmetric_pair_psi("boson", 0.4), symmetric_pair_psi("fermion", 0.4),
             symmetric_triple_psi("boson", 0.3), symmetric_triple_psi("fermion", 0.3)]
    for psi in cases:
        n = psi.n_particles
        for _ in range(25):
            c = LabeledConfiguration(rng.normal(size=(n, 1)) * 1.2)
            dev = np.max(np.abs(symmetrized_velocity_labeled(psi, c)
                                - standard_velocity(psi, c)))
            worst = max(worst, float(dev))
    report(1, "reduction identity", worst < 1e-10,
           f"max |v_sym - v_std| = {worst:.3e} < 1e-10 over symmetric N=2,3 states")


def test_criterion_02_disjoint_support_reduction():
    t = 0.4
    ks = np.array([0.7, -0.3])
    masses = np.array([1.0, MASS_RATIO])
    psi = WaveFunction(EM, product_state([[0.0], [20.0]], [1.0, 1.0],
                                         [[ks[0]], [ks[1]]])).evolve(t)
    # at the drifted packet centers the per-packet laws give exactly hbar k/m
    centers = np.array([[0.0 + ks[0] * t / masses[0]],
                        [20.0 + ks[1] * t / masses[1]]])
    got = symmetrized_velocity_labeled(psi, LabeledConfiguration(centers))
    expected = ks / masses
    rel = float(np.max(np.abs(got[:, 0] - expected) / np.abs(expected)))
    report(2, "disjoint-support reduction", rel < 1e-8,
           f"rel deviation from the per-slot laws = {rel:.3e} < 1e-8 at 20 sigma")


def test_criterion_03_strong_permutation_invariance():
    psi = overlap_psi()
    c0 = LabeledConfiguration([[0.2], [0.9]])
    swap = Permutation((1, 0))
    dev_sym = strong_permutation_invariance_check(psi, c0, swap, 1.0,
                                                  tolerance=TAU_ODE)
    dev_std = strong_permutation_invariance_check(psi, c0, swap, 1.0,
                                                  law=VelocityLaw.STANDARD,
                                                  tolerance=TAU_ODE)
    ok = dev_sym < 10 * TAU_ODE and dev_std > 1e3 * TAU_ODE
    report(3, "strong permutation invariance", ok,
           f"identity-based deviation {dev_sym:.3e} < {10 * TAU_ODE:.0e}; "
           f"standard-law deviation {dev_std:.3e} > {1e3 * TAU_ODE:.0e}")


def test_criterion_04_equivariance_10k():
    psi = overlap_psi()
    m = 10_000
    limit = 1.63 / math.sqrt(m)
    worst = {}
    aborted = {}
    for law in (VelocityLaw.STANDARD, VelocityLaw.IDENTITY_BASED):
        spec = EnsembleSpec(m, 42, law, (0.3, 0.7, 1.0))
        records = propagate_ensemble(spec, psi, tolerance=TAU_ODE)
        rep = equivariance_test(records, psi, law, reference_samples=10 ** 6, seed=43)
        worst[law.value] = max(a.statistic for s in rep.slices for a in s.axes)
        aborted[law.value] = max(s.aborted_fraction for s in rep.slices)
    ok = all(v < limit for v in worst.values()) and \
        all(v < 0.01 for v in aborted.values())
    report(4, "equivariance at M=10^4", ok,
           f"max per-axis D: standard {worst['standard']:.4f}, "
           f"identity {worst['identity']:.4f} < {limit:.4f}; "
           f"aborted fractions {max(aborted.values()):.3%} < 1%")


def test_criterion_05_transform_unitarity():
    rng = np.random.default_rng(55)
    psi = overlap_psi().evolve(0.5)
    mismatches = 0
    for _ in range(10_000):
        c = LabeledConfiguration(rng.normal(size=(2, 1)) * 1.5 + [[0.0], [0.6]])
        q, _ = canonicalize(c)
        if not np.array_equal(restrict(lift(psi, q), c), psi.evaluate(c)):
            mismatches += 1
    mc = transform_norm_check(psi, 100_000, seed=56)
    ok = mismatches == 0 and mc.discrepancy < 3.0 * mc.stderr
    report(5, "transform unitarity", ok,
           f"restrict(lift) exact on 10^4 configurations ({mismatches} mismatches); "
           f"MC norm ratio off by {mc.discrepancy:.2e} "
           f"< 3 x stderr {3 * mc.stderr:.2e}")


def test_criterion_06_cross_form_velocity_identity():
    rng = np.random.default_rng(66)
    worst = 0.0
    psis = [overlap_psi().evolve(0.5), symmetric_triple_psi("boson", 0.25)]
    for psi in psis:
        n = psi.n_particles
        section = WaveFunctionSection(psi)
        for _ in range(500):
            q, _ = canonicalize(LabeledConfiguration(rng.normal(size=(n, 1))))
            dev = np.max(np.abs(phi_velocity(section, q)
                                - symmetrized_velocity(psi, q)))
            worst = max(worst, float(dev))
    report(6, "fiber-form velocity identity", worst < 1e-10,
           f"max |v_phi - v_sym| = {worst:.3e} < 1e-10 over 10^3 points, N = 2, 3")


def _exchange_loop(steps=64):
    s_vals = np.linspace(0.0, 1.0, steps + 1)
    pts = [np.array([[-np.cos(np.pi * s), np.sin(np.pi * s)],
                     [np.cos(np.pi * s), -np.sin(np.pi * s)]]) for s in s_vals]
    pts[-1] = -pts[0]
    return pts


def test_criterion_07_holonomy_signs():
    base2 = GaussianProductState(centers=[[-0.5, 0.2], [0.8, -0.1]], widths=[1.0, 1.0],
                                 wavevecs=[[0.1, 0.0], [0.0, 0.2]],
                                 spinors=(np.ones(1),) * 2)
    psi_f = WaveFunction(uniform_species(2), exchange_symmetrize(base2, "fermion"), 0.0)
    path2 = path_from_points(_exchange_loop())
    sign_swap = holonomy_sign_test(path2, lift(psi_f, path2.start))

    ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    cyc = [np.stack([np.cos(ang + 2 * np.pi * s / 3),
                     np.sin(ang + 2 * np.pi * s / 3)], axis=-1)
           for s in np.linspace(0.0, 1.0, 97)]
    cyc[-1] = cyc[0]
    base3 = GaussianProductState(centers=[[0.3, 0.1], [-0.4, 0.5], [0.0, -0.6]],
                                 widths=[1.0] * 3, wavevecs=[[0.0, 0.0]] * 3,
                                 spinors=(np.ones(1),) * 3)
    psi_f3 = WaveFunction(uniform_species(3), exchange_symmetrize(base3, "fermion"), 0.0)
    path3 = path_from_points(cyc)
    sign_cycle = holonomy_sign_test(path3, lift(psi_f3, path3.start))

    psi_b = WaveFunction(uniform_species(2), exchange_symmetrize(base2, "boson"), 0.0)
    eb = lift(psi_b, path2.start)
    boson_fixed = bool(np.array_equal(parallel_transport(eb, path2).components,
                                      eb.components))
    ok = sign_swap == -1 and sign_cycle == 1 and boson_fixed
    report(7, "exchange holonomy", ok,
           f"exchange loop sign {sign_swap} = -1 (exact); 3-cycle sign {sign_cycle} "
           f"= +1 (exact); boson element unchanged: {boson_fixed}")


def test_criterion_08_subbundle_dimensions():
    pure_ok = True
    details = []
    for n in (2, 3):
        for k in (1, 2):
            sp = uniform_species(n, internal_dim=k)
            for stat in ("boson", "fermion"):
                rank = int(np.linalg.matrix_rank(
                    species_projector_matrix(sp, {"particle": stat}), tol=1e-9))
                pure_ok = pure_ok and rank == k ** n
        details.append(f"N={n}")
    rng = np.random.default_rng(88)

    def mixed_case(species, state, stats, expected):
        psi = WaveFunction(species, state, 0.1)
        q, _ = canonicalize(LabeledConfiguration(
            rng.normal(size=(species.n_particles, 1))))
        chk = mixed_species_subbundle_check(psi, q, stats)
        return chk.ok and chk.rank == expected

    sp_bb = SpeciesTable((SpeciesSlot(1.0, 1, "b"), SpeciesSlot(1.0, 1, "b")))
    boson_pair = exchange_symmetrize(GaussianProductState(
        centers=[[0.0], [1.0]], widths=[1.0, 1.0], wavevecs=[[0.2], [-0.1]],
        spinors=(np.ones(1),) * 2), "boson")
    case_a = mixed_case(sp_bb, boson_pair, {"b": "boson"}, 1)

    em_product = product_state([[0.0], [0.8]], [1.0, 1.0], [[0.4], [-0.1]])
    case_b = mixed_case(EM, em_product, {"electron": "fermion", "muon": "fermion"}, 2)

    sp_ffx = SpeciesTable((SpeciesSlot(1.0, 1, "f"), SpeciesSlot(1.0, 1, "f"),
                           SpeciesSlot(2.0, 1, "x")))
    ffx = exchange_symmetrize(GaussianProductState(
        centers=[[0.0], [1.0], [2.0]], widths=[1.0] * 3,
        wavevecs=[[0.1], [0.2], [0.3]], spinors=(np.ones(1),) * 3),
        ("fermion",), blocks=((0, 1),))
    case_c = mixed_case(sp_ffx, ffx, {"f": "fermion", "x": "boson"}, 3)

    ok = pure_ok and case_a and case_b and case_c
    report(8, "subbundle dimensions", ok,
           f"pure ranks k^N for N<=3, k<=2: {pure_ok}; mixed ranks "
           f"(1, 2, 3) = ({case_a}, {case_b}, {case_c}), exact integers")


def test_criterion_09_inequivalence_with_empirical_equivalence():
    psi = overlap_psi()
    c0 = LabeledConfiguration([[0.2], [0.9]])
    q0, _ = canonicalize(c0)
    obs = np.linspace(0.0, 1.0, 33)[1:]
    rec_std = integrate_trajectory(VelocityLaw.STANDARD, psi, c0, 1.0,
                                   tolerance=TAU_ODE, observation_times=obs)
    rec_idb = integrate_trajectory(VelocityLaw.IDENTITY_BASED, psi, q0, 1.0,
                                   tolerance=TAU_ODE, observation_times=obs)
    divergence = float(np.max(np.abs(np.sort(rec_std.states, axis=1)
                                     - rec_idb.states)))
    marginal = marginal_identity_test(psi, 10_000, 1.0, seed=42, tolerance=TAU_ODE)
    ok = divergence > 1e3 * TAU_ODE and marginal.passed
    report(9, "inequivalent trajectories, equivalent statistics", ok,
           f"trajectory divergence {divergence:.3e} > {1e3 * TAU_ODE:.0e} while the "
           f"two-sample D = {marginal.max_statistic:.4f} stays below "
           f"{marginal.axes[0].threshold:.4f} at the 1% level, M = 10^4")


def test_criterion_10_component_evolution_residual():
    ana = product_state([[16.0], [24.0]], [1.2, 1.0], [[0.8], [-0.3]])
    grid = grid_from_analytic(EM, ana, 0.0, 1, 128, 40.0)
    psi = WaveFunction(EM, grid, 0.0)
    q, nu = canonicalize(LabeledConfiguration([[16.5], [23.5]]))
    res = {dt: phi_schrodinger_residual(psi, q, nu, dt)
           for dt in (1e-2, 1e-3, 1e-4)}
    r1 = res[1e-2] / res[1e-3]
    r2 = res[1e-3] / res[1e-4]
    wrong = phi_schrodinger_residual(psi, q, nu, 1e-3,
                                     mass_numbering=Numbering((nu.labels[1],
                                                               nu.labels[0])))
    ok = 50 < r1 < 200 and 50 < r2 < 200 and wrong >= 10 * res[1e-3]
    report(10, "component evolution residual", ok,
           f"decade ratios {r1:.1f}, {r2:.1f} (second order); wrong-mass control "
           f"{wrong:.2e} >= 10 x {res[1e-3]:.2e}")
