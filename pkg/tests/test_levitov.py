import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from fermi_thermometry.basis import BasisSet, CouplingSpec, Geometry, ThermalState, fermi_function, prepare
from fermi_thermometry.errors import (
    DimensionMismatch,
    FockSpaceTooLarge,
    GridTooCoarse,
    RecurrenceRegion,
    WindowTooWeak,
)
from fermi_thermometry.levitov import (
    DecoherenceTrace,
    absorption_spectrum,
    converge_thermodynamic,
    decoherence_at,
    decoherence_function,
    decoherence_matrix,
    exact_trace,
    many_body_oracle,
    phase_rate,
    read_trace_csv,
)


def random_toy(m, rng, strength=0.3):
    e0 = np.sort(rng.uniform(0.0, 2.0, m))
    v = rng.normal(size=(m, m)) * strength
    h0 = np.diag(e0)
    return BasisSet.from_hamiltonians(h0, h0 + v + v.T), h0, h0 + v + v.T


def toy_thermal(basis, temperature, mu):
    f = fermi_function(basis.unperturbed_energies, mu, temperature)
    return ThermalState(temperature, mu, f, float(f.sum()))


def test_decoherence_matrix_matches_matrix_exponentials():
    rng = np.random.default_rng(11)
    basis, h0, h1 = random_toy(4, rng)
    th = toy_thermal(basis, 0.5, 1.0)
    t = 1.3
    n = np.diag(th.occupations)
    expected = np.eye(4) - n + n @ scipy.linalg.expm(1j * h1 * t) @ scipy.linalg.expm(-1j * h0 * t)
    assert np.max(np.abs(decoherence_matrix(basis, th, t) - expected)) < 1e-12


def test_decoherence_matrix_is_identity_at_zero_time():
    rng = np.random.default_rng(2)
    basis, _, _ = random_toy(5, rng)
    th = toy_thermal(basis, 0.3, 0.8)
    assert np.array_equal(decoherence_matrix(basis, th, 0.0), np.eye(5))


@pytest.mark.parametrize("m", [2, 4, 6])
def test_determinant_matches_fock_space_trace(m):
    rng = np.random.default_rng(100 + m)
    basis, _, _ = random_toy(m, rng)
    for _ in range(5):
        th = toy_thermal(basis, rng.uniform(0.05, 2.0), rng.uniform(0.0, 2.0))
        t = rng.uniform(0.0, 20.0)
        det = decoherence_at(basis, [th], t)[0]
        assert abs(det - many_body_oracle(basis, th, t)) < 1e-10


def test_single_mode_hand_formula():
    basis = BasisSet(np.array([0.3]), np.array([0.7]), overlap=np.array([[1.0]]), n_kept=1, n_perturbed=1)
    th = toy_thermal(basis, 0.2, 0.25)
    f = th.occupations[0]
    t = np.linspace(0, 20, 201)
    tr = decoherence_function(basis, th, t)
    assert np.allclose(tr.values, 1 - f + f * np.exp(1j * 0.4 * t), atol=1e-13)
    assert abs(many_body_oracle(basis, th, 3.0) - (1 - f + f * np.exp(1.2j))) < 1e-13


def test_oracle_guards():
    rng = np.random.default_rng(0)
    big, _, _ = random_toy(13, rng)
    with pytest.raises(FockSpaceTooLarge):
        many_body_oracle(big, toy_thermal(big, 1.0, 1.0), 1.0)
    b, _ = prepare(Geometry.box3d(5), CouplingSpec(-0.5), 0.1)
    with pytest.raises(DimensionMismatch):
        many_body_oracle(b, toy_thermal(b, 0.1, 1.0), 1.0)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    m=st.integers(1, 5),
    temperature=st.floats(0.01, 5.0),
    mu=st.floats(-1.0, 3.0),
    t=st.floats(0.0, 50.0),
)
def test_complete_basis_bounded_by_one(seed, m, temperature, mu, t):
    basis, _, _ = random_toy(m, np.random.default_rng(seed))
    v = decoherence_at(basis, [toy_thermal(basis, temperature, mu)], t)[0]
    assert abs(v) <= 1 + 1e-12


def test_trace_invariants_and_free_limit():
    grid = np.arange(0, 30.01, 0.1)
    tr = exact_trace(Geometry.box3d(60), -1e-8, 0.1, grid)
    assert tr.values[0] == 1
    assert np.max(np.abs(tr.values - 1)) < 1e-6
    tr = exact_trace(Geometry.box3d(60), -0.5, 0.1, grid)
    assert tr.values[0] == 1
    assert np.all(tr.magnitude <= 1 + 1e-9)
    assert tr.regime["n_kept"] > 60


def test_single_time_evaluation_matches_grid():
    b, ths = prepare(Geometry.box3d(50), CouplingSpec(-0.7), [0.05, 0.2])
    grid = np.arange(0, 12.01, 0.1)
    trs = [decoherence_function(b, th, grid) for th in ths]
    at = decoherence_at(b, ths, grid[-1])
    assert np.allclose(at, [tr.values[-1] for tr in trs], rtol=1e-12)


def test_density_doubling_leaves_trace_unchanged():
    grid = np.arange(0, 50.01, 0.25)
    a = exact_trace(Geometry.box3d(100), -0.5, 0.1, grid)
    b = exact_trace(Geometry.box3d(200), -0.5, 0.1, grid)
    assert np.max(np.abs(a.values - b.values)) < 1e-3


def test_converge_thermodynamic_free_and_interacting():
    grid = np.arange(0, 20.01, 0.5)
    _, shells = converge_thermodynamic("box3d_swave", 0.1, -1e-8, grid, start=20)
    assert shells == 40
    grid = np.arange(0, 200.01, 0.5)
    _, shells = converge_thermodynamic("box3d_swave", 0.1, -0.5, grid, start=100)
    assert shells <= 800


def test_grid_too_coarse():
    t = np.arange(6.0)
    with pytest.raises(GridTooCoarse):
        DecoherenceTrace.from_log_polar(t, np.zeros(6), np.angle(np.exp(2.0j * t)))


def test_recurrence_region_for_trap():
    g = Geometry.harmonic1d(20)
    b, (th,) = prepare(g, CouplingSpec(-1.0), 0.1)
    with pytest.raises(RecurrenceRegion):
        decoherence_function(b, th, np.arange(0, 1.01 * math.pi / g.size_parameter, 1.0))


def test_trace_validation():
    with pytest.raises(ValueError):
        DecoherenceTrace(np.array([0.0, 1.0]), np.array([0.9, 0.5]), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        DecoherenceTrace(np.array([0.0, 1.0]), np.array([1.0, 1.5]), np.zeros(2), np.array([0.0, 0.4]))
    with pytest.raises(ValueError):
        decoherence_function(BasisSet.from_hamiltonians(np.eye(2), np.eye(2)), None, np.array([1.0, 2.0]))


def test_csv_round_trip(tmp_path):
    tr = exact_trace(Geometry.box3d(40), -0.5, 0.1, np.arange(0, 5.01, 0.1))
    path = tr.to_csv(tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "t_over_tauF,re_v,im_v,abs_v,phase"
    back = read_trace_csv(path)
    assert np.allclose(back.values, tr.values, rtol=1e-11, atol=1e-12)
    assert np.allclose(back.phase, tr.phase, rtol=1e-11, atol=1e-12)


def test_phase_rate_averages_out_ripple():
    t = np.arange(0, 80.001, 0.05)
    # linear phase plus a ripple at the Fermi frequency
    phase = -0.3 * t + 0.02 * np.sin(t)
    tr = DecoherenceTrace.from_log_polar(t, np.zeros_like(t), np.angle(np.exp(1j * phase)))
    assert phase_rate(tr, 40.0) == pytest.approx(-0.3, abs=1e-5)
    assert phase_rate(tr, 40.0, window=0.0) == pytest.approx(-0.3 + 0.02 * math.cos(40.0), abs=1e-5)
    with pytest.raises(ValueError):
        phase_rate(tr, 79.0)


# ---------------------------------------------------------------------------
# spectrum


def lorentzian_trace(w0, gamma, stop=1500.0, step=0.2):
    t = np.arange(0, stop + step / 2, step)
    return DecoherenceTrace.from_log_polar(t, -gamma * t, np.angle(np.exp(1j * w0 * t)))


def test_synthetic_lorentzian_spectrum():
    w0, gamma, eta = -0.4, 0.01, 0.005
    tr = lorentzian_trace(w0, gamma)
    omega = np.linspace(-1, 1, 8001)
    spec = absorption_spectrum(tr, eta, omega)
    # v = exp(i w0 t) and A(omega) = Re int exp(-i omega t) v / pi peak at +w0
    assert abs(spec.peak() - w0) <= omega[1] - omega[0]
    assert spec.width() == pytest.approx(2 * (gamma + eta), rel=1e-3)
    g = gamma + eta
    assert np.allclose(spec.values, g / np.pi / ((omega - w0) ** 2 + g**2), atol=2e-3 * spec.values.max())


def test_sum_rule_on_default_grid():
    spec = absorption_spectrum(lorentzian_trace(0.3, 0.02, stop=800.0))
    assert spec.integral() == pytest.approx(1.0, abs=1e-9)


def test_window_too_weak():
    with pytest.raises(WindowTooWeak):
        absorption_spectrum(lorentzian_trace(0.1, 0.001, stop=300.0), eta=0.005)


def test_spectrum_csv(tmp_path):
    spec = absorption_spectrum(lorentzian_trace(0.3, 0.05, stop=400.0), omega_grid=np.linspace(-1, 1, 11))
    lines = spec.to_csv(tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "omega_tauF,A"
    assert len(lines) == 12
