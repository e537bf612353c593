"""Reduced-scale invariant suite behind ``idbohm selftest``.

Runs every structural identity at desk scale (ensembles capped at 10^3) and
prints one PASS/FAIL line per check.  Wall clock is a few minutes at most.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .core import (
    LabeledConfiguration,
    Permutation,
    SpeciesSlot,
    SpeciesTable,
    canonicalize,
    uniform_species,
)
from .bundle import (
    WaveFunctionSection,
    holonomy_sign_test,
    lift,
    mixed_species_subbundle_check,
    path_from_points,
    phi_schrodinger_residual,
    phi_velocity,
    restrict,
    species_projector_matrix,
    transform_norm_check,
)
from .dynamics import (
    VelocityLaw,
    standard_velocity,
    strong_permutation_invariance_check,
    symmetrized_velocity,
    symmetrized_velocity_labeled,
)
from .ensemble import (
    EnsembleSpec,
    continuity_residual_scan,
    equivariance_test,
    marginal_identity_test,
    propagate_ensemble,
)
from .wavefunction import (
    GaussianProductState,
    WaveFunction,
    exchange_symmetrize,
    grid_from_analytic,
    product_state,
)

_EM = SpeciesTable((SpeciesSlot(1.0, tag="electron"), SpeciesSlot(206.8, tag="muon")))


def _overlap_psi() -> WaveFunction:
    return WaveFunction(_EM, product_state([[0.0], [0.8]], [1.0, 1.0],
                                           [[0.4], [-0.1]]))


def _checks():
    rng = np.random.default_rng(20260809)

    def check_n1_reduction():
        psi = WaveFunction(uniform_species(1), product_state([[0.3]], [1.0], [[0.5]]), 0.2)
        c = LabeledConfiguration([[0.7]])
        q, _ = canonicalize(c)
        dev = float(np.max(np.abs(symmetrized_velocity(psi, q) - standard_velocity(psi, c))))
        return dev < 1e-12, {"deviation": dev}

    def check_symmetric_reduction():
        base = GaussianProductState(centers=[[0.0], [1.0]], widths=[1.0, 0.8],
                                    wavevecs=[[0.4], [-0.3]],
                                    spinors=(np.ones(1), np.ones(1)))
        psi = WaveFunction(uniform_species(2), exchange_symmetrize(base, "boson"), 0.3)
        dev = 0.0
        for _ in range(20):
            c = LabeledConfiguration(rng.normal(size=(2, 1)))
            dev = max(dev, float(np.max(np.abs(
                symmetrized_velocity_labeled(psi, c) - standard_velocity(psi, c)))))
        return dev < 1e-10, {"max_deviation": dev}

    def check_disjoint_reduction():
        psi = WaveFunction(_EM, product_state([[0.0], [20.0]], [1.0, 1.0],
                                              [[0.7], [-0.3]]), 0.0).evolve(0.4)
        worst = 0.0
        for i, (center, k, mass) in enumerate([([0.0], [0.7], 1.0),
                                               ([20.0], [-0.3], 206.8)]):
            one = WaveFunction(uniform_species(1, mass=mass),
                               product_state([center], [1.0], [k]), 0.0).evolve(0.4)
            drift = np.asarray(center) + np.asarray(k) * 0.4 / mass
            expected = standard_velocity(one, LabeledConfiguration(drift[None, :]))[0]
            both = np.array([[0.0], [20.0]]) + np.array([[0.7], [-0.3 / 206.8]]) * 0.4
            got = symmetrized_velocity_labeled(psi, LabeledConfiguration(both))[i]
            worst = max(worst, float(np.max(np.abs(got - expected)))
                        / max(float(np.max(np.abs(expected))), 1e-30))
        return worst < 1e-8, {"rel_deviation": worst}

    def check_strong_invariance():
        psi = _overlap_psi()
        c0 = LabeledConfiguration([[0.2], [0.9]])
        swap = Permutation((1, 0))
        dev = strong_permutation_invariance_check(psi, c0, swap, 1.0)
        dev_std = strong_permutation_invariance_check(psi, c0, swap, 1.0,
                                                      law=VelocityLaw.STANDARD)
        ok = dev < 10 * 1e-8 and dev_std > 1e3 * 1e-8
        return ok, {"identity_dev": dev, "standard_dev": dev_std}

    def check_lift_restrict():
        psi = _overlap_psi().evolve(0.5)
        for _ in range(1000):
            c = LabeledConfiguration(rng.normal(size=(2, 1)) * 2.0)
            q, _ = canonicalize(c)
            if not np.array_equal(restrict(lift(psi, q), c), psi.evaluate(c)):
                return False, {"exact_matches": "failed"}
        return True, {"exact_matches": 1000}

    def check_transform_norm():
        res = transform_norm_check(_overlap_psi().evolve(0.3), 20000, seed=11)
        ok = res.discrepancy < 3.0 * res.stderr + 1e-12
        return ok, {"discrepancy": res.discrepancy, "stderr": res.stderr}

    def check_phi_velocity():
        base = GaussianProductState(centers=[[0.1], [0.9], [-0.6]],
                                    widths=[1.0, 0.8, 1.2],
                                    wavevecs=[[0.3], [-0.5], [0.2]],
                                    spinors=(np.ones(1),) * 3)
        sp3 = SpeciesTable((SpeciesSlot(1.0), SpeciesSlot(2.0), SpeciesSlot(0.5)))
        psi = WaveFunction(sp3, exchange_symmetrize(base, "boson"), 0.25)
        dev = 0.0
        for _ in range(100):
            q, _ = canonicalize(LabeledConfiguration(rng.normal(size=(3, 1))))
            dev = max(dev, float(np.max(np.abs(
                phi_velocity(WaveFunctionSection(psi), q) - symmetrized_velocity(psi, q)))))
        return dev < 1e-10, {"max_deviation": dev}

    def check_holonomy():
        s_vals = np.linspace(0.0, 1.0, 65)
        loop = [np.array([[-np.cos(np.pi * s), np.sin(np.pi * s)],
                          [np.cos(np.pi * s), -np.sin(np.pi * s)]]) for s in s_vals]
        loop[-1] = -loop[0]
        base = GaussianProductState(centers=[[-0.5, 0.2], [0.8, -0.1]],
                                    widths=[1.0, 1.0],
                                    wavevecs=[[0.1, 0.0], [0.0, 0.2]],
                                    spinors=(np.ones(1),) * 2)
        psi = WaveFunction(uniform_species(2), exchange_symmetrize(base, "fermion"), 0.0)
        path = path_from_points(loop)
        sign = holonomy_sign_test(path, lift(psi, path.start))
        ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        cyc = [np.stack([np.cos(ang + 2 * np.pi * s / 3),
                         np.sin(ang + 2 * np.pi * s / 3)], axis=-1)
               for s in np.linspace(0.0, 1.0, 97)]
        cyc[-1] = cyc[0]
        base3 = GaussianProductState(centers=[[0.3, 0.1], [-0.4, 0.5], [0.0, -0.6]],
                                     widths=[1.0] * 3, wavevecs=[[0.0, 0.0]] * 3,
                                     spinors=(np.ones(1),) * 3)
        psi3 = WaveFunction(uniform_species(3), exchange_symmetrize(base3, "fermion"), 0.0)
        p3 = path_from_points(cyc)
        sign3 = holonomy_sign_test(p3, lift(psi3, p3.start))
        return sign == -1 and sign3 == 1, {"exchange": sign, "three_cycle": sign3}

    def check_subbundle_ranks():
        ok = True
        ranks = {}
        for n in (2, 3):
            for k in (1, 2):
                sp = uniform_species(n, internal_dim=k)
                for stat in ("boson", "fermion"):
                    r = int(np.linalg.matrix_rank(
                        species_projector_matrix(sp, {"particle": stat}), tol=1e-9))
                    ranks[f"N{n}k{k}{stat[0]}"] = r
                    ok = ok and r == k ** n
        spmix = SpeciesTable((SpeciesSlot(1.0, 1, "f"), SpeciesSlot(1.0, 1, "f"),
                              SpeciesSlot(2.0, 1, "x")))
        rmix = int(np.linalg.matrix_rank(
            species_projector_matrix(spmix, {"f": "fermion", "x": "boson"}), tol=1e-9))
        ok = ok and rmix == 3
        ranks["mixed"] = rmix
        return ok, ranks

    def check_equivariance_small():
        psi = _overlap_psi()
        ok = True
        worst = 0.0
        for law in (VelocityLaw.STANDARD, VelocityLaw.IDENTITY_BASED):
            spec = EnsembleSpec(1000, 20260809, law, (0.5, 1.0))
            records = propagate_ensemble(spec, psi)
            report = equivariance_test(records, psi, law, reference_samples=200000,
                                       seed=17)
            worst = max(worst, max(a.statistic / a.threshold
                                   for s in report.slices for a in s.axes))
            ok = ok and report.passed
        return ok, {"worst_D_over_threshold": worst}

    def check_marginal_identity_small():
        res = marginal_identity_test(_overlap_psi(), 1000, 1.0, seed=23)
        return res.passed, {"max_D": res.max_statistic,
                            "threshold": res.axes[0].threshold}

    def check_grid_cross_backend():
        ana = product_state([[16.0], [24.0]], [1.2, 1.0], [[0.8], [-0.3]])
        grid = grid_from_analytic(_EM, ana, 0.0, 1, 128, 40.0)
        psi_g = WaveFunction(_EM, grid, 0.0).evolve(1.0, substeps=1000)
        psi_a = WaveFunction(_EM, ana, 0.0).evolve(1.0)
        pts = grid.geometry.point_grid()
        va, _ = psi_a.values_and_gradients(pts, want_gradients=False)
        vg, _ = psi_g.values_and_gradients(pts, want_gradients=False)
        cell = grid.geometry.spacing ** 2
        l2 = float(np.sqrt(cell * np.sum(np.abs(va - vg) ** 2)))
        cont = continuity_residual_scan(WaveFunction(_EM, grid, 0.0),
                                        VelocityLaw.IDENTITY_BASED, 0.2)
        q, nu = canonicalize(LabeledConfiguration([[16.5], [23.5]]))
        psi_g0 = WaveFunction(_EM, grid, 0.0)
        r_coarse = phi_schrodinger_residual(psi_g0, q, nu, 1e-2)
        r_fine = phi_schrodinger_residual(psi_g0, q, nu, 1e-3)
        ok = l2 < 1e-6 and cont < 1e-3 and r_coarse / r_fine > 50
        return ok, {"evolve_l2": l2, "continuity": cont,
                    "residual_ratio": r_coarse / r_fine}

    def check_mixed_species():
        spmix = SpeciesTable((SpeciesSlot(1.0, 1, "f"), SpeciesSlot(1.0, 1, "f"),
                              SpeciesSlot(2.0, 1, "x")))
        basem = GaussianProductState(centers=[[0.0], [1.0], [2.0]], widths=[1.0] * 3,
                                     wavevecs=[[0.1], [0.2], [0.3]],
                                     spinors=(np.ones(1),) * 3)
        psi = WaveFunction(spmix, exchange_symmetrize(basem, ("fermion",),
                                                      blocks=((0, 1),)), 0.1)
        q, _ = canonicalize(LabeledConfiguration(rng.normal(size=(3, 1))))
        chk = mixed_species_subbundle_check(psi, q, {"f": "fermion", "x": "boson"})
        return chk.ok, {"rank": chk.rank, "expected": chk.expected_dim,
                        "residual": chk.residual}

    return [
        ("n1_reduction", check_n1_reduction),
        ("symmetric_reduction", check_symmetric_reduction),
        ("disjoint_reduction", check_disjoint_reduction),
        ("strong_invariance", check_strong_invariance),
        ("lift_restrict_exact", check_lift_restrict),
        ("transform_norm_mc", check_transform_norm),
        ("phi_velocity_identity", check_phi_velocity),
        ("holonomy_signs", check_holonomy),
        ("subbundle_ranks", check_subbundle_ranks),
        ("mixed_species_subbundle", check_mixed_species),
        ("equivariance_1k", check_equivariance_small),
        ("marginal_identity_1k", check_marginal_identity_small),
        ("grid_backend", check_grid_cross_backend),
    ]


def run_selftest(quiet: bool = False, outdir: str | None = None) -> bool:
    lines = []
    all_ok = True
    started = time.time()
    for name, fn in _checks():
        t0 = time.time()
        try:
            ok, measured = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, measured = False, {"exception": repr(exc)}
        all_ok = all_ok and ok
        detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in measured.items())
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.time() - t0:.1f}s)"
        lines.append(line)
        if not quiet:
            print(line)
    summary = f"{'all checks passed' if all_ok else 'CHECKS FAILED'} " \
              f"in {time.time() - started:.1f}s"
    if not quiet:
        print(summary)
    if outdir:
        path = Path(outdir)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "selftest.txt", "w") as fh:
            fh.write("\n".join(lines + [summary]) + "\n")
    return all_ok
