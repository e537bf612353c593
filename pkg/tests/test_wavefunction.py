import math

import numpy as np
import pytest

from idbohm.core import (
    LabeledConfiguration,
    SpeciesSlot,
    SpeciesTable,
    uniform_species,
)
from idbohm.wavefunction import (
    GaussianProductState,
    OutOfBoxError,
    WaveFunction,
    exchange_symmetrize,
    grid_from_analytic,
    load_grid_state,
    product_state,
    save_grid_state,
    superpose,
)

SP1 = uniform_species(1)
EM = SpeciesTable((SpeciesSlot(1.0), SpeciesSlot(206.8)))


def free_grid_pair(n=256, length=40.0, centers=((18.0,), (22.0,)),
                   ks=((0.5,), (-0.1,)), widths=(1.0, 1.0)):
    ana = product_state(list(centers), list(widths), list(ks))
    grid = grid_from_analytic(EM, ana, 0.0, dim=1, n=n, length=length)
    return WaveFunction(EM, ana, 0.0), WaveFunction(EM, grid, 0.0)


# evaluate ------------------------------------------------------------------------


def test_peak_amplitude_is_gaussian_normalization():
    # d-dimensional packet peak: (2 pi s0^2)^(-d/4) per particle
    for d in (1, 2, 3):
        psi = WaveFunction(SP1, product_state([[0.0] * d], [1.3], [[0.0] * d]))
        value = psi.evaluate(LabeledConfiguration([[0.0] * d]))
        expected = (2.0 * np.pi * 1.3 ** 2) ** (-d / 4.0)
        assert value.shape == (1,)
        assert abs(value[0] - expected) < 1e-14


def test_phase_scaling_is_linear():
    state = product_state([[0.4]], [1.0], [[0.3]])
    psi = WaveFunction(SP1, state)
    alpha = 0.77
    scaled = WaveFunction(SP1, state.scaled(np.exp(1j * alpha)))
    c = LabeledConfiguration([[0.9]])
    assert np.allclose(scaled.evaluate(c), np.exp(1j * alpha) * psi.evaluate(c),
                       rtol=0, atol=1e-15)


def test_grid_evaluation_at_nodes_returns_stored_amplitude():
    _, psi_g = free_grid_pair()
    geo = psi_g.state.geometry
    idx = (100, 140)
    c = LabeledConfiguration([[geo.axis_coords[idx[0]]], [geo.axis_coords[idx[1]]]])
    value = psi_g.evaluate(c)
    assert np.allclose(value, psi_g.state.amplitudes[idx[0], idx[1]], rtol=0, atol=1e-12)


def test_grid_out_of_box_raises():
    _, psi_g = free_grid_pair()
    with pytest.raises(OutOfBoxError):
        psi_g.evaluate(LabeledConfiguration([[41.0], [20.0]]))
    with pytest.raises(OutOfBoxError):
        psi_g.evaluate(LabeledConfiguration([[-0.5], [20.0]]))


# density -------------------------------------------------------------------------


def test_density_normalization_by_quadrature():
    psi = WaveFunction(SP1, product_state([[0.5]], [1.0], [[2.0]]))
    xs = np.linspace(-12, 13, 6001)
    vals, _ = psi.state.values_and_gradients(SP1, xs.reshape(-1, 1, 1), 0.0,
                                             want_gradients=False)
    total = np.trapezoid(np.abs(vals[:, 0]) ** 2, xs)
    assert abs(total - 1.0) < 1e-9


def test_density_gauge_invariant():
    state = product_state([[0.4]], [1.0], [[0.3]])
    psi = WaveFunction(SP1, state)
    rotated = WaveFunction(SP1, state.scaled(np.exp(0.9j)))
    c = LabeledConfiguration([[1.1]])
    assert abs(psi.density(c) - rotated.density(c)) < 1e-15


def test_odd_state_has_node_at_origin():
    # antisymmetric combination of mirrored packets vanishes at x = 0
    plus = GaussianProductState(centers=[[1.0]], widths=[1.0], wavevecs=[[0.0]],
                                spinors=(np.ones(1),))
    minus = GaussianProductState(centers=[[-1.0]], widths=[1.0], wavevecs=[[0.0]],
                                 spinors=(np.ones(1),))
    odd = superpose([(1.0, plus), (-1.0, minus)])
    psi = WaveFunction(SP1, odd)
    assert psi.density(LabeledConfiguration([[0.0]])) < 1e-28


# gradient -----------------------------------------------------------------------


def test_plane_wave_gradient_factor():
    # wide packet behaves as a plane wave near its center: grad = i k value
    k = 0.7
    psi = WaveFunction(SP1, product_state([[0.0]], [4000.0], [[k]]))
    c = LabeledConfiguration([[0.3]])
    value = psi.evaluate(c)
    grad = psi.gradient(c, 0)
    assert np.allclose(grad[0], 1j * k * value, rtol=1e-6)


def test_real_gaussian_gradient_zero_at_center():
    psi = WaveFunction(SP1, product_state([[0.7]], [1.0], [[0.0]]))
    assert np.allclose(psi.gradient(LabeledConfiguration([[0.7]]), 0), 0.0, atol=1e-16)


def test_grid_gradient_matches_finite_difference_oracle():
    # independent oracle: 6th-order central stencil on the node values
    sp = uniform_species(1)
    ana = product_state([[20.0]], [1.0], [[0.8]])
    grid = grid_from_analytic(sp, ana, 0.0, dim=1, n=512, length=40.0)
    psi = WaveFunction(sp, grid, 0.0)
    geo = grid.geometry
    h = geo.spacing
    amps = grid.amplitudes[:, 0]
    idx = np.arange(200, 320)
    fd = (-amps[idx - 3] + 9 * amps[idx - 2] - 45 * amps[idx - 1]
          + 45 * amps[idx + 1] - 9 * amps[idx + 2] + amps[idx + 3]) / (60 * h)
    pts = geo.axis_coords[idx].reshape(-1, 1, 1)
    _, grads = psi.values_and_gradients(pts)
    spectral = grads[:, 0, 0, 0]
    scale = np.max(np.abs(spectral))
    assert np.max(np.abs(spectral - fd)) / scale < 1e-6


# current -------------------------------------------------------------------------


def test_plane_wave_current_is_hbar_k_over_m_times_density():
    k = 1.3
    psi = WaveFunction(SP1, product_state([[0.0]], [3000.0], [[k]]))
    c = LabeledConfiguration([[0.5]])
    rho = psi.density(c)
    j = psi.current(c, 0)
    assert np.allclose(j, k * rho, rtol=1e-6)


def test_real_state_has_zero_current():
    psi = WaveFunction(SP1, product_state([[0.2]], [1.0], [[0.0]]))
    j = psi.current(LabeledConfiguration([[0.9]]), 0)
    assert np.allclose(j, 0.0, atol=1e-18)


# evolve --------------------------------------------------------------------------


def test_free_gaussian_width_formula():
    s0, m, t = 1.0, 1.0, 1.7
    psi = WaveFunction(SP1, product_state([[0.0]], [s0], [[0.0]])).evolve(t)
    sig_t = s0 * math.sqrt(1.0 + (t / (2 * m * s0 ** 2)) ** 2)
    # the density at the center of a spread packet is (2 pi sig_t^2)^(-1/2)
    rho0 = psi.density(LabeledConfiguration([[0.0]]))
    assert abs(rho0 - (2 * np.pi * sig_t ** 2) ** -0.5) < 1e-10
    xs = np.linspace(-25, 25, 20001)
    vals, _ = psi.state.values_and_gradients(SP1, xs.reshape(-1, 1, 1), psi.time,
                                             want_gradients=False)
    rho = np.abs(vals[:, 0]) ** 2
    var = np.trapezoid(xs ** 2 * rho, xs)
    assert abs(math.sqrt(var) - sig_t) < 1e-10


def test_grid_evolution_matches_analytic_within_margin():
    psi_a, psi_g = free_grid_pair()
    t = 1.0
    psi_a1 = psi_a.evolve(t)
    psi_g1 = psi_g.evolve(t, substeps=100)
    pts = psi_g.state.geometry.point_grid()
    va, _ = psi_a1.values_and_gradients(pts, want_gradients=False)
    vg, _ = psi_g1.values_and_gradients(pts, want_gradients=False)
    cell = psi_g.state.geometry.spacing ** 2
    l2 = math.sqrt(cell * float(np.sum(np.abs(va - vg) ** 2)))
    assert l2 < 1e-6


def test_evolve_zero_dt_is_identity():
    psi_a, psi_g = free_grid_pair()
    assert psi_a.evolve(0.0) is psi_a
    assert psi_g.evolve(0.0) is psi_g


def test_evolve_negative_dt_rejected():
    psi_a, _ = free_grid_pair()
    with pytest.raises(ValueError):
        psi_a.evolve(-0.1)


def test_matrix_potential_evolution_conserves_norm():
    # spin-1/2 particle with a position-dependent Hermitian coupling
    sp = uniform_species(1, internal_dim=2)
    ana = product_state([[20.0]], [1.0], [[0.4]], internal_dims=(2,))
    geo_probe = grid_from_analytic(sp, ana, 0.0, 1, 128, 40.0).geometry
    xs = geo_probe.axis_coords
    sigma_x = np.array([[0.0, 1.0], [1.0, 0.0]])
    field = 0.3 * np.exp(-0.5 * (xs - 20.0) ** 2)
    v = field[:, None, None] * sigma_x[None, :, :]
    grid = grid_from_analytic(sp, ana, 0.0, 1, 128, 40.0, potential=v)
    psi = WaveFunction(sp, grid, 0.0)
    out = psi.evolve(0.5, substeps=500)
    assert abs(out.norm() - 1.0) < 1e-10
    # the coupling actually rotates the spinor
    second = np.sqrt(float(np.sum(np.abs(out.state.amplitudes[..., 1]) ** 2)))
    assert second > 1e-3


# norm ----------------------------------------------------------------------------


def test_constructed_states_are_normalized():
    psi_a, psi_g = free_grid_pair()
    assert abs(psi_a.norm() - 1.0) < 1e-12
    assert abs(psi_g.norm() - 1.0) < 1e-12
    base = GaussianProductState(centers=[[0.0], [1.0]], widths=[1.0, 0.8],
                                wavevecs=[[0.4], [-0.3]], spinors=(np.ones(1),) * 2)
    for stat in ("boson", "fermion"):
        sym = WaveFunction(uniform_species(2), exchange_symmetrize(base, stat))
        assert abs(sym.norm() - 1.0) < 1e-12


def test_norm_homogeneity():
    state = product_state([[0.0]], [1.0], [[0.4]])
    psi2 = WaveFunction(SP1, state.scaled(2.0))
    assert abs(psi2.norm() - 2.0) < 1e-12


def test_norm_constant_in_time_analytic():
    psi = WaveFunction(EM, product_state([[0.0], [0.8]], [1.0, 1.0], [[0.4], [-0.1]]))
    assert abs(psi.evolve(2.3).norm() - 1.0) < 1e-12


def test_grid_norm_drift_over_thousand_steps():
    _, psi_g = free_grid_pair(n=128)
    out = psi_g.evolve(1.0, substeps=1000)
    assert abs(out.norm() - 1.0) < 1e-8


# cross-backend and continuity invariants ------------------------------------------


def test_backends_agree_pointwise_at_nodes():
    psi_a, psi_g = free_grid_pair()
    geo = psi_g.state.geometry
    nodes = geo.axis_coords
    pick = np.stack(np.meshgrid(nodes[110:130:3], nodes[135:155:3], indexing="ij"),
                    axis=-1).reshape(-1, 2, 1)
    ra, ca = psi_a.densities_and_currents(pick)
    rg, cg = psi_g.densities_and_currents(pick)
    assert np.max(np.abs(ra - rg)) < 1e-6
    assert np.max(np.abs(ca - cg)) < 1e-6
    va, ga = psi_a.values_and_gradients(pick)
    vg, gg = psi_g.values_and_gradients(pick)
    assert np.max(np.abs(va - vg)) < 1e-6
    assert np.max(np.abs(ga - gg)) < 1e-6


def test_local_continuity_residual_grid():
    from idbohm.dynamics import VelocityLaw
    from idbohm.ensemble import continuity_residual_scan
    _, psi_g = free_grid_pair(n=128)
    res = continuity_residual_scan(psi_g, VelocityLaw.STANDARD, 0.2, dt=1e-3)
    assert res < 1e-3


def test_global_norm_conservation_under_grid_evolution():
    _, psi_g = free_grid_pair(n=128)
    norms = [psi_g.evolve(t, substeps=max(1, int(t / 1e-2))).norm()
             for t in (0.0, 0.3, 0.9)]
    assert max(abs(n - 1.0) for n in norms) < 1e-6


# serialization ---------------------------------------------------------------------


def test_grid_checkpoint_round_trip(tmp_path):
    _, psi_g = free_grid_pair(n=64)
    out = psi_g.evolve(0.3, substeps=30)
    path = tmp_path / "state.bin"
    save_grid_state(path, out.state, out.time)
    loaded, t = load_grid_state(path, EM)
    assert t == out.time
    assert np.array_equal(loaded.amplitudes, out.state.amplitudes)
    assert loaded.geometry.n == 64 and loaded.geometry.length == 40.0


def test_grid_checkpoint_species_mismatch(tmp_path):
    _, psi_g = free_grid_pair(n=64)
    path = tmp_path / "state.bin"
    save_grid_state(path, psi_g.state, 0.0)
    with pytest.raises(ValueError):
        load_grid_state(path, uniform_species(3))


def test_grid_requires_power_of_two():
    ana = product_state([[20.0]], [1.0], [[0.0]])
    with pytest.raises(ValueError):
        grid_from_analytic(SP1, ana, 0.0, 1, 100, 40.0)
