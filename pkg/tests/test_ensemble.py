import itertools
import math

import numpy as np
import pytest

from idbohm.core import LabeledConfiguration, uniform_species
from idbohm.dynamics import VelocityLaw, integrate_trajectory
from idbohm.ensemble import (
    EnsembleSpec,
    continuity_residual_scan,
    equivariance_test,
    marginal_identity_test,
    propagate_ensemble,
    sample_initial,
    _axis_permutation,
    _spectral_derivative,
)
from idbohm.stats import (
    ks_statistic,
    ks_threshold_one_sample,
    ks_threshold_two_sample,
    ks_two_sample,
)
from idbohm.wavefunction import WaveFunction, grid_from_analytic, product_state

SP1 = uniform_species(1)


def sigma_t(t, s0=1.0, m=1.0):
    return s0 * math.sqrt(1.0 + (t / (2 * m * s0 ** 2)) ** 2)


# statistics helpers -----------------------------------------------------------------


def test_ks_statistics_match_scipy(rng):
    import scipy.stats
    a = rng.normal(size=500)
    b = rng.normal(size=700) * 1.2 + 0.1
    assert np.isclose(ks_two_sample(a, b),
                      scipy.stats.ks_2samp(a, b, method="asymp").statistic)
    assert np.isclose(ks_statistic(a, scipy.stats.norm.cdf),
                      scipy.stats.kstest(a, "norm").statistic)


def test_ks_thresholds():
    # the 1% one-sample coefficient is ~1.628, the value the gates are built on
    assert abs(ks_threshold_one_sample(10_000, 0.01) * 100.0 - 1.6276) < 1e-3
    assert np.isclose(ks_threshold_two_sample(10_000, 10_000, 0.01),
                      1.6276 / math.sqrt(10_000) * math.sqrt(2.0), rtol=1e-3)


# sampling ----------------------------------------------------------------------------


def test_sample_mean_within_clt_bound(overlap_psi):
    m = 40_000
    samples = sample_initial(overlap_psi, m, seed=1)
    pts = np.array([c.points for c in samples])
    # electron marginal is N(0, 1) at t = 0
    assert abs(pts[:, 0, 0].mean() - 0.0) < 4.0 / math.sqrt(m)
    assert abs(pts[:, 1, 0].mean() - 0.8) < 4.0 / math.sqrt(m)


def test_sampling_is_deterministic(overlap_psi):
    a = sample_initial(overlap_psi, 100, seed=7)
    b = sample_initial(overlap_psi, 100, seed=7)
    assert all(x == y for x, y in zip(a, b))
    c = sample_initial(overlap_psi, 100, seed=8)
    assert any(x != y for x, y in zip(a, c))


def test_narrow_grid_density_concentrates_samples():
    ana = product_state([[20.0]], [0.15], [[0.0]])
    grid = grid_from_analytic(SP1, ana, 0.0, 1, 256, 40.0)
    psi = WaveFunction(SP1, grid, 0.0)
    pts = np.array([c.points for c in sample_initial(psi, 500, seed=3)])
    assert np.all(np.abs(pts - 20.0) < 1.5)


# propagation -----------------------------------------------------------------------


def test_single_member_matches_integrate_trajectory(overlap_psi):
    spec = EnsembleSpec(1, 42, VelocityLaw.STANDARD, (0.5, 1.0))
    records = propagate_ensemble(spec, overlap_psi)
    start = sample_initial(overlap_psi, 1, seed=42)[0]
    direct = integrate_trajectory(VelocityLaw.STANDARD, overlap_psi, start, 1.0,
                                  dt0=min(1e-2, 1.0 / 8.0),
                                  observation_times=[0.5, 1.0])
    assert np.array_equal(records[0].states, direct.states)
    assert np.array_equal(records[0].times, direct.times)


def test_worker_count_does_not_change_results(overlap_psi):
    spec = EnsembleSpec(64, 5, VelocityLaw.IDENTITY_BASED, (0.4, 0.9))
    serial = propagate_ensemble(spec, overlap_psi, workers=1)
    parallel = propagate_ensemble(spec, overlap_psi, workers=4)
    assert len(serial) == len(parallel) == 64
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.states, b.states)
        assert a.status == b.status


def test_free_gaussian_ensemble_variance_tracks_dispersion():
    psi = WaveFunction(SP1, product_state([[0.0]], [1.0], [[0.0]]))
    m = 4000
    spec = EnsembleSpec(m, 13, VelocityLaw.STANDARD, (1.0,))
    records = propagate_ensemble(spec, psi)
    ends = np.array([r.states[-1, 0, 0] for r in records])
    expect = sigma_t(1.0)
    # variance of the sample variance ~ 2 sigma^4 / m
    se = math.sqrt(2.0 / m) * expect ** 2
    assert abs(ends.var() - expect ** 2) < 3.0 * se


# equivariance ------------------------------------------------------------------------


def test_equivariance_both_laws(overlap_psi):
    m = 2000
    for law in (VelocityLaw.STANDARD, VelocityLaw.IDENTITY_BASED):
        spec = EnsembleSpec(m, 20260809, law, (0.0 + 0.3, 0.7, 1.0))
        records = propagate_ensemble(spec, overlap_psi)
        report = equivariance_test(records, overlap_psi, law,
                                   reference_samples=200_000, seed=2)
        assert report.passed
        for s in report.slices:
            assert s.aborted_fraction < 0.01
            for a in s.axes:
                assert a.statistic < 1.63 / math.sqrt(m)


def test_equivariance_negative_control_fails():
    # mis-scaled velocities (x 1.1) push the empirical marginals off |psi_t|^2;
    # a fast packet makes the drift mismatch decisive
    psi = WaveFunction(SP1, product_state([[0.0]], [1.0], [[1.5]]))
    m = 2000
    spec = EnsembleSpec(m, 99, VelocityLaw.STANDARD, (1.0,))
    records = propagate_ensemble(spec, psi, velocity_scale=1.1)
    report = equivariance_test(records, psi, VelocityLaw.STANDARD,
                               reference_samples=100_000, seed=3)
    assert not report.passed


def test_equivariance_rejects_tiny_ensembles(overlap_psi):
    spec = EnsembleSpec(10, 1, VelocityLaw.STANDARD, (0.5,))
    records = propagate_ensemble(spec, overlap_psi)
    with pytest.raises(ValueError):
        equivariance_test(records, overlap_psi, VelocityLaw.STANDARD)


def test_report_serialization(tmp_path, overlap_psi):
    spec = EnsembleSpec(200, 4, VelocityLaw.STANDARD, (0.5,))
    records = propagate_ensemble(spec, overlap_psi)
    report = equivariance_test(records, overlap_psi, VelocityLaw.STANDARD,
                               reference_samples=50_000, seed=5)
    jpath = tmp_path / "report.json"
    report.to_json(jpath)
    import json
    data = json.loads(jpath.read_text())
    assert data["law"] == "standard" and "slices" in data
    tpath = tmp_path / "report.tsv"
    report.write_tsv(tpath)
    lines = tpath.read_text().strip().splitlines()
    assert lines[0].startswith("time\taxis")
    assert len(lines) == 1 + 2 * len(report.slices[0].axes) / 2 * len(report.slices)


def test_canonical_statistics_invariant_under_initial_relabeling(overlap_psi):
    # canonicalization is label-blind: relabeling recorded configurations by a
    # fixed swap changes nothing after canonicalization, and the identity-based
    # law turns relabeled starts into bitwise-identical unordered trajectories.
    # (The labeled standard-law trajectories themselves do change under
    # relabeling when the masses differ; that asymmetry is tested elsewhere.)
    from idbohm.dynamics import _canonical_sort_rows, _integrate_batch
    starts = np.array([c.points for c in sample_initial(overlap_psi, 200, seed=6)])
    swapped = starts[:, ::-1, :]
    assert np.array_equal(_canonical_sort_rows(starts), _canonical_sort_rows(swapped))

    obs = np.array([0.7])
    res_a = _integrate_batch(overlap_psi, VelocityLaw.STANDARD, starts, obs, 1e-2, 1e-8)
    ends_a = res_a.states[:, -1]
    assert np.array_equal(_canonical_sort_rows(ends_a),
                          _canonical_sort_rows(ends_a[:, ::-1, :]))

    res_i = _integrate_batch(overlap_psi, VelocityLaw.IDENTITY_BASED, starts, obs,
                             1e-2, 1e-8)
    res_j = _integrate_batch(overlap_psi, VelocityLaw.IDENTITY_BASED, swapped, obs,
                             1e-2, 1e-8)
    assert np.array_equal(res_i.states, res_j.states)


# marginal identity ---------------------------------------------------------------------


def test_marginal_identity_passes(overlap_psi):
    res = marginal_identity_test(overlap_psi, 2000, 1.0, seed=5)
    assert res.passed
    assert res.aborted_fraction_standard < 0.01
    assert res.aborted_fraction_identity < 0.01


def test_marginal_identity_same_law_trivially_passes(overlap_psi):
    res = marginal_identity_test(overlap_psi, 1000, 0.7, seed=6,
                                 law_a=VelocityLaw.STANDARD,
                                 law_b=VelocityLaw.STANDARD)
    assert res.passed


def test_marginal_identity_wrong_mass_negative_control(overlap_psi, electron_muon):
    from idbohm.core import SpeciesSlot, SpeciesTable
    wrong_species = SpeciesTable((SpeciesSlot(206.8, tag="electron"),
                                  SpeciesSlot(1.0, tag="muon")))
    psi_wrong = WaveFunction(wrong_species, overlap_psi.state, 0.0)
    res = marginal_identity_test(overlap_psi, 2000, 1.0, seed=7,
                                 psi_identity=psi_wrong)
    assert not res.passed


# continuity -------------------------------------------------------------------------------


def grid_pair_psi():
    from idbohm.core import SpeciesSlot, SpeciesTable
    em = SpeciesTable((SpeciesSlot(1.0), SpeciesSlot(206.8)))
    ana = product_state([[16.0], [24.0]], [1.2, 1.0], [[0.8], [-0.3]])
    return WaveFunction(em, grid_from_analytic(em, ana, 0.0, 1, 128, 40.0), 0.0)


def test_continuity_residual_smooth_state():
    psi = grid_pair_psi()
    for law in (VelocityLaw.STANDARD, VelocityLaw.IDENTITY_BASED):
        assert continuity_residual_scan(psi, law, 0.2, dt=1e-3) < 1e-3


def test_continuity_residual_stationary_state():
    # harmonic ground state: both sides of the balance vanish
    omega, length = 1.0, 40.0
    width = math.sqrt(1.0 / (2 * omega))
    ana = product_state([[length / 2]], [width], [[0.0]])
    probe = grid_from_analytic(SP1, ana, 0.0, 1, 256, length)
    xs = probe.geometry.axis_coords
    v = 0.5 * omega ** 2 * (xs - length / 2) ** 2
    grid = grid_from_analytic(SP1, ana, 0.0, 1, 256, length, potential=v)
    psi = WaveFunction(SP1, grid, 0.0)
    assert continuity_residual_scan(psi, VelocityLaw.STANDARD, 0.1, dt=1e-3) < 1e-6


def test_symmetrized_residual_equals_permutation_sum():
    # brute-force identity: the symmetrized balance field is the sum of the
    # labeled balance field over permuted grid axes
    psi = grid_pair_psi()
    dt = 1e-3
    psi_0 = psi.evolve(0.2)
    psi_mid = psi_0.evolve(dt)
    psi_2 = psi_mid.evolve(dt)
    drho = (psi_2.state.density_array() - psi_0.state.density_array()) / (2 * dt)
    cur = psi_mid.state.current_arrays()
    labeled = drho + psi_mid.state.divergence(cur)

    n, d = 2, 1
    sym_from_labeled = np.zeros_like(labeled)
    for image in itertools.permutations(range(n)):
        axes = _axis_permutation(n, d, image)
        sym_from_labeled += np.transpose(labeled, axes)

    rho_sym_dot = np.zeros_like(drho)
    div_sym = np.zeros_like(drho)
    for image in itertools.permutations(range(n)):
        axes = _axis_permutation(n, d, image)
        rho_sym_dot += np.transpose(drho, axes)
        for i in range(n):
            field = np.transpose(cur[image[i] * d], axes)
            div_sym += _spectral_derivative(psi_mid.state, field, i * d)
    assert np.max(np.abs(rho_sym_dot + div_sym - sym_from_labeled)) < 1e-12


def test_continuity_scan_rejects_analytic_backend(overlap_psi):
    with pytest.raises(ValueError):
        continuity_residual_scan(overlap_psi, VelocityLaw.STANDARD, 0.1)


# determinism ---------------------------------------------------------------------------


def test_reports_bitwise_deterministic(overlap_psi):
    def one(workers):
        spec = EnsembleSpec(400, 77, VelocityLaw.IDENTITY_BASED, (0.5, 1.0))
        records = propagate_ensemble(spec, overlap_psi, workers=workers)
        report = equivariance_test(records, overlap_psi, VelocityLaw.IDENTITY_BASED,
                                   reference_samples=50_000, seed=8)
        return report.to_json_dict()

    assert one(1) == one(3)


def test_worker_count_env_override(monkeypatch):
    from idbohm.ensemble import worker_count
    monkeypatch.setenv("IDBOHM_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    monkeypatch.delenv("IDBOHM_WORKERS")
    assert worker_count() == 1


def test_initial_samples_pass_ks_against_exact_marginals(overlap_psi):
    # at t = 0 the KS statistic is pure sampling noise
    m = 10_000
    pts = np.array([c.points for c in sample_initial(overlap_psi, m, seed=21)])
    for i in range(2):
        cdf = lambda xs, i=i: overlap_psi.state.marginal_cdf(
            overlap_psi.species, 0.0, i, 0, xs)
        assert ks_statistic(pts[:, i, 0], cdf) < 1.63 / math.sqrt(m)
