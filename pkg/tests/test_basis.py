import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from fermi_thermometry.basis import (
    BasisSet,
    CouplingSpec,
    Geometry,
    GeometryKind,
    build_harmonic_sector,
    build_overlap_matrix,
    load_basis,
    prepare,
    save_basis,
    solve_chemical_potential,
    solve_scattering_sector,
)
from fermi_thermometry.errors import InvalidCoupling, UnitarityViolation


def box3d_basis(shells, kfa, n_max):
    g = Geometry.box3d(shells)
    return build_overlap_matrix(solve_scattering_sector(g, CouplingSpec(kfa), n_max), epsilon=1.0)


# ---------------------------------------------------------------------------
# geometry and coupling


def test_geometry_sizes_put_fermi_energy_at_one():
    assert Geometry.box3d(200).size_parameter == pytest.approx(200 * math.pi)
    assert Geometry.box1d(50).size_parameter == pytest.approx(99 * math.pi)
    g = Geometry.harmonic1d(201)
    assert g.size_parameter * (2 * 201 - 1.5) == pytest.approx(1.0)
    assert g.unperturbed_energies(201)[-1] == pytest.approx(1.0)
    assert Geometry.box3d(200).unperturbed_energies(200)[-1] == pytest.approx(1.0)
    assert Geometry.box1d(50).unperturbed_energies(50)[-1] == pytest.approx(1.0)


def test_harmonic_from_frequency_rounds_to_integer_filling():
    g = Geometry.harmonic1d_from_omega(2.5e-3)
    assert g.shell_count == 201
    assert g.kind is GeometryKind.HARMONIC1D_EVEN


@pytest.mark.parametrize("bad", [0.0, 0.3, math.inf, math.nan])
def test_coupling_rejects_non_negative_or_non_finite(bad):
    with pytest.raises(InvalidCoupling):
        CouplingSpec(bad)


# ---------------------------------------------------------------------------
# scattering sector


def test_3d_roots_match_brute_force_scan():
    # kR + delta = n pi with tan(delta) = -k a  <=>  sin(kR) = k a cos(kR)
    shells, a = 4, -0.5
    basis = solve_scattering_sector(Geometry.box3d(shells), CouplingSpec(a), 8)
    R = shells * math.pi
    f = lambda k: math.sin(k * R) - k * a * math.cos(k * R)
    for n in range(1, 9):
        k = np.linspace((n - 0.5) * math.pi / R + 1e-12, n * math.pi / R - 1e-12, 20001)
        vals = np.array([f(x) for x in k])
        (i,) = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        assert i.size == 1
        root = optimize.brentq(f, k[i[0]], k[i[0] + 1], xtol=1e-15)
        assert math.sqrt(basis.perturbed_energies[n - 1]) == pytest.approx(root, rel=1e-12)
        delta = basis.scattering_phases[n - 1]
        assert math.tan(delta) == pytest.approx(-root * a, rel=1e-10)


def test_fermi_surface_phase_approaches_continuum_value():
    errors = []
    for shells in (50, 200, 800):
        b = solve_scattering_sector(Geometry.box3d(shells), CouplingSpec(-1.0), shells + 5)
        k = np.sqrt(b.perturbed_energies)
        j = int(np.argmin(np.abs(k - 1.0)))
        errors.append(abs(b.scattering_phases[j] - math.pi / 4))
    assert errors[-1] < 1e-2
    assert errors[0] > errors[1] > errors[2]


@settings(max_examples=30, deadline=None)
@given(kfa=st.floats(-5.0, -0.01), shells=st.integers(2, 30))
def test_3d_phases_monotone_and_bracketed(kfa, shells):
    b = solve_scattering_sector(Geometry.box3d(shells), CouplingSpec(kfa), 3 * shells)
    d = b.scattering_phases
    assert np.all((d > 0) & (d < math.pi / 2))
    assert np.all(np.diff(d) > 0)
    assert np.all(np.diff(b.perturbed_energies) > 0)
    # attractive in 3D: every level moves down
    assert np.all(b.perturbed_energies < b.unperturbed_energies)


@settings(max_examples=30, deadline=None)
@given(kfa=st.floats(-5.0, -0.01), shells=st.integers(2, 30))
def test_1d_phases_bracketed_and_levels_move_up(kfa, shells):
    b = solve_scattering_sector(Geometry.box1d(shells), CouplingSpec(kfa), 3 * shells)
    d = b.scattering_phases
    assert np.all((d > -math.pi / 2) & (d < 0))
    assert np.all(b.perturbed_energies > b.unperturbed_energies)


# ---------------------------------------------------------------------------
# overlaps


def test_3d_overlap_matches_quadrature():
    shells, a = 4, -0.5
    b = box3d_basis(shells, a, 40)
    R = shells * math.pi
    k = Geometry.box3d(shells).wavevectors(40)
    kp = np.sqrt(b.perturbed_energies)
    d = b.scattering_phases
    for m, n in [(0, 0), (0, 3), (5, 2), (12, 30)]:
        A = 1 / math.sqrt(1 + math.sin(2 * d[n]) / (2 * kp[n] * R))
        val, _ = integrate.quad(
            lambda r: (2 / R) * A * math.sin(k[m] * r) * math.sin(kp[n] * r + d[n]),
            0, R, limit=400, epsabs=1e-14, epsrel=1e-12,
        )
        assert b.overlap[m, n] == pytest.approx(val, rel=1e-10, abs=1e-13)


def test_1d_overlap_matches_quadrature():
    shells, a = 4, -0.7
    g = Geometry.box1d(shells)
    b = build_overlap_matrix(solve_scattering_sector(g, CouplingSpec(a), 40), epsilon=1.0)
    L = g.size_parameter
    k = g.wavevectors(40)
    kp = np.sqrt(b.perturbed_energies)
    d = b.scattering_phases
    for m, n in [(0, 0), (1, 3), (7, 2)]:
        B = 1 / math.sqrt(1 - math.sin(2 * d[n]) / (kp[n] * L))
        val, _ = integrate.quad(
            lambda x: 2 * (2 / L) * B * math.cos(k[m] * x) * math.cos(kp[n] * x + d[n]),
            0, L / 2, limit=400, epsabs=1e-14, epsrel=1e-12,
        )
        assert b.overlap[m, n] == pytest.approx(val, rel=1e-10, abs=1e-13)


def test_free_limits_give_identity():
    b3 = box3d_basis(10, -1e-10, 30)
    assert np.max(np.abs(b3.overlap - np.eye(30))) < 1e-8
    assert np.allclose(b3.perturbed_energies, b3.unperturbed_energies, rtol=1e-8)
    # in 1D the non-interacting limit is a -> -infinity
    g = Geometry.box1d(10)
    b1 = build_overlap_matrix(solve_scattering_sector(g, CouplingSpec(-1e10), 30), epsilon=1.0)
    assert np.max(np.abs(b1.overlap - np.eye(30))) < 1e-8


def test_row_norms_bounded_after_truncation():
    basis, (th,) = prepare(Geometry.box3d(100), CouplingSpec(-1.5), 0.1)
    rows = np.sum(np.abs(basis.overlap) ** 2, axis=1)
    assert np.all(rows > 1 - basis.epsilon)
    assert np.all(rows <= 1 + 1e-12)


def test_unitarity_violation_when_basis_too_small():
    g = Geometry.box3d(50)
    with pytest.raises(UnitarityViolation):
        build_overlap_matrix(solve_scattering_sector(g, CouplingSpec(-2.0), 60), epsilon=1e-4)


# ---------------------------------------------------------------------------
# chemical potential and truncation


@pytest.mark.parametrize("geometry", [Geometry.box3d(200), Geometry.box1d(200), Geometry.harmonic1d(200)])
def test_mu_zero_temperature_limit(geometry):
    th = solve_chemical_potential(geometry, 1e-4)
    assert th.chemical_potential == pytest.approx(1.0, abs=1e-3)
    # the level at E_F is half filled
    assert th.occupations[199] == pytest.approx(0.5, abs=1e-3)


def test_filling_matches_smoothed_staircase():
    # levels below E = 1 average to N_s - 1/2 once the staircase is smoothed
    th = solve_chemical_potential(Geometry.box3d(200), 0.1)
    assert th.shell_count == 199.5
    assert np.sum(th.occupations) == pytest.approx(199.5, abs=1e-8)


def test_mu_matches_dense_scan():
    g = Geometry.box3d(200)
    T = 0.2
    th = solve_chemical_potential(g, T)
    e = g.unperturbed_energies(20000)
    mus = np.linspace(0.5, 1.2, 7001)
    counts = np.array([np.sum(1 / (np.exp(np.clip((e - m) / T, -700, 700)) + 1)) for m in mus])
    n = th.shell_count
    j = int(np.nonzero(counts > n)[0][0])
    # linear interpolation inside the bracketing scan cell
    mu_scan = mus[j - 1] + (n - counts[j - 1]) * (mus[j] - mus[j - 1]) / (counts[j] - counts[j - 1])
    assert th.chemical_potential == pytest.approx(mu_scan, abs=1e-6)
    explicit = solve_chemical_potential(g, T, shell_count=200)
    assert np.sum(explicit.occupations) == pytest.approx(200, abs=1e-8)


def test_truncation_includes_thermal_tail_and_is_stable():
    g = Geometry.box3d(200)
    b1, _ = prepare(g, CouplingSpec(-0.5), 0.1)
    b2, _ = prepare(g, CouplingSpec(-0.5), 0.1, n_max=4 * b1.overlap.shape[1])
    assert b1.n_kept > 200
    assert (b1.n_kept, b1.n_perturbed) == (b2.n_kept, b2.n_perturbed)


def test_zero_temperature_truncation_keeps_the_sea():
    b, _ = prepare(Geometry.box3d(100), CouplingSpec(-0.5), 1e-3)
    assert b.n_kept == 100


def test_truncation_shares_block_over_temperatures():
    g = Geometry.box3d(100)
    b, ths = prepare(g, CouplingSpec(-0.5), [0.05, 0.2])
    single, _ = prepare(g, CouplingSpec(-0.5), 0.2)
    assert b.n_kept == single.n_kept
    assert all(th.occupations.size == b.n_kept for th in ths)


def test_save_load_round_trip_is_bit_exact(tmp_path):
    b, _ = prepare(Geometry.box3d(30), CouplingSpec(-0.8), 0.1)
    back = load_basis(save_basis(b, tmp_path / "b.json"))
    assert np.array_equal(back.overlap, b.overlap)
    assert np.array_equal(back.perturbed_energies, b.perturbed_energies)
    assert np.array_equal(back.unperturbed_energies, b.unperturbed_energies)
    assert np.array_equal(back.scattering_phases, b.scattering_phases)
    assert back.geometry == b.geometry
    assert (back.n_kept, back.n_perturbed, back.epsilon) == (b.n_kept, b.n_perturbed, b.epsilon)


def test_from_hamiltonians_is_unitary():
    rng = np.random.default_rng(3)
    h0 = np.diag(np.sort(rng.uniform(0, 2, 5)))
    v = rng.normal(size=(5, 5)) * 0.1
    b = BasisSet.from_hamiltonians(h0, h0 + v + v.T)
    assert np.allclose(b.overlap @ b.overlap.T, np.eye(5), atol=1e-12)


# ---------------------------------------------------------------------------
# harmonic trap


def _origin_green_sum(energy, omega0):
    """Green's function at the origin by direct summation over Hermite states."""
    mp.mp.dps = 30
    ell = mp.sqrt(2 / mp.mpf(omega0))
    E = mp.mpf(energy)

    def term(m):
        # phi_2m(0)^2 = (2m)! / (sqrt(pi) l 4^m (m!)^2)
        amp2 = mp.factorial(2 * m) / (mp.sqrt(mp.pi) * ell * mp.mpf(4) ** m * mp.factorial(m) ** 2)
        return amp2 / (E - omega0 * (2 * m + mp.mpf(1) / 2))

    return mp.nsum(term, [0, mp.inf], method="levin")


def test_harmonic_lowest_level_matches_transcendental_oracle():
    g = Geometry.harmonic1d_from_omega(2.5e-3)
    w = g.size_parameter
    coupling = CouplingSpec(-1.0)
    b = build_harmonic_sector(g, coupling, 50)
    f = lambda e: 1 / coupling.contact_strength - float(_origin_green_sum(e, w))
    root = optimize.brentq(f, 0.5 * w * (1 + 1e-9), 2.5 * w * (1 - 1e-9), xtol=1e-16, rtol=1e-13)
    assert b.perturbed_energies[0] == pytest.approx(root, rel=1e-8)


def test_harmonic_dense_route_converges_toward_secular():
    w = 1 / (2 * 41 - 1.5)
    sec = build_harmonic_sector(w, CouplingSpec(-1.0), 400).perturbed_energies[:5]
    errors = [
        np.max(np.abs(build_harmonic_sector(w, CouplingSpec(-1.0), n, method="dense").perturbed_energies[:5] / sec - 1))
        for n in (250, 1000, 4000)
    ]
    # truncation error of the dense matrix falls like n_max**-0.5
    assert errors[0] > errors[1] > errors[2]
    assert errors[0] / errors[2] == pytest.approx(4.0, rel=0.25)


def test_harmonic_free_limit():
    w = 0.01
    b = build_harmonic_sector(w, CouplingSpec(-1e12), 30)
    assert np.allclose(b.perturbed_energies, b.unperturbed_energies, rtol=1e-9)
    assert np.max(np.abs(b.overlap - np.eye(30))) < 1e-6
