"""Exact decoherence function of the impurity qubit.

The many-body overlap ``v(t) = Tr[exp(i H_1 t) exp(-i H_0 t) rho_E]`` of a
non-interacting gas is the single-particle determinant

    v(t) = det[1 - n + n exp(i h_1 t) exp(-i h_0 t)]

evaluated in the truncated unperturbed eigenbasis. A dense Fock-space
evaluation of the trace is provided for small bases as an oracle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .basis import (
    DEFAULT_EPSILON,
    BasisSet,
    CouplingSpec,
    Geometry,
    GeometryKind,
    ThermalState,
    prepare,
)
from .errors import (
    DimensionMismatch,
    FockSpaceTooLarge,
    GridTooCoarse,
    NonConvergence,
    RecurrenceRegion,
    WindowTooWeak,
)

MAX_PHASE_STEP = 0.5 * np.pi
FOCK_MODE_CAP = 12
DEFAULT_ETA = 0.005


def default_time_grid(stop: float = 300.0, step: float = 0.1) -> np.ndarray:
    n = int(round(stop / step))
    return step * np.arange(n + 1)


@dataclass(frozen=True, eq=False)
class DecoherenceTrace:
    """``v(t)`` on a time grid, with unwrapped phase and log-magnitude.

    ``log_magnitude`` is kept alongside ``values`` so that strongly decayed
    traces lose no information to underflow.
    """

    times: np.ndarray
    values: np.ndarray
    phase: np.ndarray
    log_magnitude: np.ndarray
    regime: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("times", "values", "phase", "log_magnitude"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.times.size and self.times[0] == 0 and self.values[0] != 1:
            raise ValueError(f"v(0) must be exactly 1, got {self.values[0]}")
        if np.any(self.log_magnitude > 1e-9):
            raise ValueError("|v| exceeds 1 beyond tolerance")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @classmethod
    def from_log_polar(
        cls,
        times,
        log_magnitude,
        wrapped_phase,
        regime: dict | None = None,
        max_phase_step: float = MAX_PHASE_STEP,
    ) -> "DecoherenceTrace":
        """Assemble a trace, continuing the phase onto the nearest branch.

        Raises :class:`GridTooCoarse` if consecutive points differ in phase
        by more than ``max_phase_step`` after continuation.
        """
        times = np.asarray(times, dtype=float)
        log_magnitude = np.minimum(np.asarray(log_magnitude, dtype=float), 0.0)
        phase = np.unwrap(np.asarray(wrapped_phase, dtype=float))
        if phase.size:
            phase = phase - 2 * np.pi * np.round(phase[0] / (2 * np.pi))
        steps = np.abs(np.diff(phase))
        if steps.size and steps.max() > max_phase_step:
            i = int(np.argmax(steps))
            raise GridTooCoarse(
                f"phase jumps by {steps[i]:.3f} rad between t = {times[i]:g} and {times[i + 1]:g}; refine the grid"
            )
        values = np.exp(log_magnitude + 1j * phase)
        if times.size and times[0] == 0:
            values[0] = 1.0
        return cls(times, values, phase, log_magnitude, dict(regime or {}))

    def to_csv(self, path: str | Path) -> Path:
        """Write ``t_over_tauF, re_v, im_v, abs_v, phase`` (12 significant digits)."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_over_tauF", "re_v", "im_v", "abs_v", "phase"])
            for t, v, p in zip(self.times, self.values, self.phase):
                w.writerow([_fmt(t), _fmt(v.real), _fmt(v.imag), _fmt(abs(v)), _fmt(p)])
        return path


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def read_trace_csv(path: str | Path, regime: dict | None = None) -> DecoherenceTrace:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, re, im, mag, ph = data.T
    with np.errstate(divide="ignore"):
        logm = np.log(mag)
    v = re + 1j * im
    return DecoherenceTrace(t, v, ph, logm, dict(regime or {}))


# ---------------------------------------------------------------------------
# determinant engine


def _check_shapes(basis: BasisSet, occupations: np.ndarray):
    u = basis.overlap
    if u is None:
        raise DimensionMismatch("basis has no overlap matrix")
    n_rows = u.shape[0]
    if basis.unperturbed_energies.size < n_rows or occupations.size < n_rows:
        raise DimensionMismatch(
            f"overlap has {n_rows} rows but only {min(basis.unperturbed_energies.size, occupations.size)} "
            "occupied-level entries"
        )
    if u.shape[1] != basis.perturbed_energies.size:
        raise DimensionMismatch("overlap columns do not match perturbed energies")


def evolution_matrix(basis: BasisSet, t: float) -> np.ndarray:
    """``exp(i h_1 t) exp(-i h_0 t)`` in the retained unperturbed basis."""
    u = basis.overlap
    n = u.shape[0]
    if t == 0:
        return np.eye(n, dtype=complex)
    e0 = basis.unperturbed_energies[:n]
    e1 = basis.perturbed_energies
    if np.iscomplexobj(u):
        w = (u * np.exp(1j * e1 * t)) @ u.conj().T
    else:
        w = (u * np.cos(e1 * t)) @ u.T + 1j * ((u * np.sin(e1 * t)) @ u.T)
    return w * np.exp(-1j * e0 * t)[None, :]


def decoherence_matrix(basis: BasisSet, thermal: ThermalState, t: float) -> np.ndarray:
    """Matrix ``1 - n + n exp(i h_1 t) exp(-i h_0 t)`` whose determinant is ``v(t)``.

    Entry ``[m, k] = (1 - f_m) delta_mk + f_m sum_n U[m,n] e^{i E'_n t} U*[k,n] e^{-i E_k t}``.
    At ``t = 0`` the evolution operator is the identity exactly.
    """
    f = np.asarray(thermal.occupations)
    _check_shapes(basis, f)
    n = basis.overlap.shape[0]
    f = f[:n]
    x = evolution_matrix(basis, t)
    return _assemble(x, f)


def _assemble(x, f):
    a = f[:, None] * x
    a[np.diag_indices_from(a)] += 1.0 - f
    return a


def log_det(a: np.ndarray) -> tuple[float, float]:
    """``(log|det a|, arg det a)`` accumulated pivot by pivot from an LU factorisation.

    The phase is returned unreduced; callers wrap it.
    """
    lu, piv = scipy.linalg.lu_factor(a, overwrite_a=True, check_finite=False)
    d = np.diagonal(lu)
    swaps = int(np.count_nonzero(piv != np.arange(piv.size)))
    with np.errstate(divide="ignore"):
        log_abs = float(np.sum(np.log(np.abs(d))))
    phase = float(np.sum(np.angle(d))) + np.pi * swaps
    return log_abs, phase


def _check_grid(t_grid) -> np.ndarray:
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("time grid must be a non-empty 1D array")
    if t[0] != 0:
        raise ValueError("time grid must start at t = 0")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return t


def _check_recurrence(basis: BasisSet, t: np.ndarray):
    g = basis.geometry
    if g is not None and g.kind is GeometryKind.HARMONIC1D_EVEN and t[-1] * g.size_parameter >= np.pi:
        raise RecurrenceRegion(
            f"harmonic-trap traces stop before the half-period pi/omega_0 = {np.pi / g.size_parameter:.1f}"
        )


def _regime(basis: BasisSet, thermal: ThermalState) -> dict:
    return {
        "channel": "exact",
        "temperature": thermal.temperature,
        "chemical_potential": thermal.chemical_potential,
        "kFa": basis.coupling.kFa if basis.coupling else None,
        "geometry": basis.geometry.label if basis.geometry else "custom",
        "n_kept": basis.n_kept,
        "n_perturbed": basis.n_perturbed,
        "epsilon": basis.epsilon,
    }


def decoherence_functions(
    basis: BasisSet,
    thermals: Sequence[ThermalState],
    t_grid,
    max_phase_step: float = MAX_PHASE_STEP,
) -> list[DecoherenceTrace]:
    """``v(t)`` for several thermal states sharing one basis.

    The evolution operator is formed once per time point and reused for
    every occupation vector.
    """
    t = _check_grid(t_grid)
    _check_recurrence(basis, t)
    for th in thermals:
        _check_shapes(basis, np.asarray(th.occupations))
    n = basis.overlap.shape[0]
    occ = [np.asarray(th.occupations)[:n] for th in thermals]
    log_abs = np.zeros((len(thermals), t.size))
    phase = np.zeros((len(thermals), t.size))
    for j, tj in enumerate(t):
        if tj == 0:
            continue
        x = evolution_matrix(basis, tj)
        for i, f in enumerate(occ):
            log_abs[i, j], phase[i, j] = log_det(_assemble(x, f))
    wrapped = np.angle(np.exp(1j * phase))
    return [
        DecoherenceTrace.from_log_polar(t, log_abs[i], wrapped[i], _regime(basis, th), max_phase_step)
        for i, th in enumerate(thermals)
    ]


def decoherence_function(
    basis: BasisSet, thermal: ThermalState, t_grid, max_phase_step: float = MAX_PHASE_STEP
) -> DecoherenceTrace:
    """``v(t) = det A(t)`` on ``t_grid`` (must start at zero)."""
    return decoherence_functions(basis, [thermal], t_grid, max_phase_step)[0]


def decoherence_at(basis: BasisSet, thermals: Sequence[ThermalState], t: float) -> np.ndarray:
    """Complex ``v(t)`` at a single time for several thermal states."""
    x = evolution_matrix(basis, t)
    n = basis.overlap.shape[0]
    out = np.empty(len(thermals), dtype=complex)
    for i, th in enumerate(thermals):
        la, ph = log_det(_assemble(x, np.asarray(th.occupations)[:n]))
        out[i] = np.exp(la + 1j * ph)
    return out


def phase_rate(trace: DecoherenceTrace, t: float, window: float = 2 * np.pi) -> float:
    """Mean ``dphi/dt`` over ``[t - window/2, t + window/2]``.

    The default window is one period of the Fermi-edge ripple (frequency
    ``E_F``), so the ripple averages out. ``window=0`` gives the
    instantaneous central difference at the nearest grid point.
    """
    times = trace.times
    if window <= 0:
        j = int(np.argmin(np.abs(times - t)))
        return float(np.gradient(trace.phase, times)[j])
    lo, hi = t - window / 2, t + window / 2
    if lo < times[0] or hi > times[-1]:
        raise ValueError("averaging window extends beyond the trace")
    phase_lo, phase_hi = np.interp([lo, hi], times, trace.phase)
    return float((phase_hi - phase_lo) / window)


def exact_trace(
    geometry: Geometry,
    kFa: float,
    temperature: float,
    t_grid,
    epsilon: float = DEFAULT_EPSILON,
) -> DecoherenceTrace:
    """Convenience wrapper: build the basis and evaluate one trace."""
    basis, (thermal,) = prepare(geometry, CouplingSpec(kFa), [temperature], epsilon)
    return decoherence_function(basis, thermal, t_grid)


# ---------------------------------------------------------------------------
# Fock-space oracle


def _fock_operators(m: int):
    """Jordan-Wigner annihilation operators on ``2**m`` states."""
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    z = np.diag([1.0, -1.0])
    eye = np.eye(2)
    ops = []
    for j in range(m):
        factors = [z] * j + [a] + [eye] * (m - j - 1)
        op = factors[0]
        for fct in factors[1:]:
            op = np.kron(op, fct)
        ops.append(op)
    return ops


def _second_quantise(h: np.ndarray, ops) -> np.ndarray:
    dim = ops[0].shape[0]
    out = np.zeros((dim, dim), dtype=complex)
    for i, ci in enumerate(ops):
        for j, cj in enumerate(ops):
            if h[i, j] != 0:
                out += h[i, j] * (ci.T @ cj)
    return out


def _expm_hermitian(h: np.ndarray, t: float) -> np.ndarray:
    w, v = np.linalg.eigh(h)
    return (v * np.exp(1j * w * t)) @ v.conj().T


def many_body_oracle(basis: BasisSet, thermal: ThermalState, t: float) -> complex:
    """``Tr[exp(i H_1 t) exp(-i H_0 t) rho_E]`` by dense Fock-space algebra.

    Test-only reference for small square bases: builds the second-quantised
    Hamiltonians of ``h_0 = diag(E)`` and ``h_1 = U diag(E') U^+`` and the
    grand-canonical state at the thermal state's ``(T, mu)``.
    """
    u = basis.overlap
    m = u.shape[0]
    if m > FOCK_MODE_CAP:
        raise FockSpaceTooLarge(f"{m} modes exceed the Fock-space cap of {FOCK_MODE_CAP}")
    if u.shape[0] != u.shape[1]:
        raise DimensionMismatch("the oracle needs a square (complete) basis")
    e0 = basis.unperturbed_energies[:m]
    h0 = np.diag(e0).astype(complex)
    h1 = (u * basis.perturbed_energies) @ u.conj().T
    ops = _fock_operators(m)
    big_h0 = _second_quantise(h0, ops)
    big_h1 = _second_quantise(h1, ops)
    number = sum(c.T @ c for c in ops)
    beta = 1.0 / thermal.temperature
    gibbs = -beta * (np.diag(big_h0).real - thermal.chemical_potential * np.diag(number))
    rho = np.exp(gibbs - gibbs.max())
    rho /= rho.sum()
    evolved = _expm_hermitian(big_h1, t) @ _expm_hermitian(big_h0, -t)
    return complex(np.sum(np.diagonal(evolved) * rho))


# ---------------------------------------------------------------------------
# absorption spectrum


@dataclass(frozen=True, eq=False)
class Spectrum:
    frequencies: np.ndarray
    values: np.ndarray
    window: float
    regime: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.frequencies))

    def peak(self) -> float:
        return float(self.frequencies[int(np.argmax(self.values))])

    def width(self) -> float:
        """Full width at half maximum of the dominant peak."""
        return _fwhm(self.frequencies, self.values)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_tauF", "A"])
            for om, a in zip(self.frequencies, self.values):
                w.writerow([_fmt(om), _fmt(a)])
        return path


def _fwhm(x, y) -> float:
    i = int(np.argmax(y))
    half = 0.5 * y[i]
    lo = i
    while lo > 0 and y[lo] > half:
        lo -= 1
    hi = i
    while hi < y.size - 1 and y[hi] > half:
        hi += 1

    def cross(a, b):
        if y[a] == y[b]:
            return x[a]
        return x[a] + (half - y[a]) * (x[b] - x[a]) / (y[b] - y[a])

    return float(cross(hi - 1, hi) - cross(lo, lo + 1))


def trapezoid_weights(t: np.ndarray) -> np.ndarray:
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def absorption_spectrum(trace: DecoherenceTrace, eta: float = DEFAULT_ETA, omega_grid=None) -> Spectrum:
    """``A(omega) = Re int_0^inf dt exp(-i omega t - eta t) v(t) / pi``.

    Trapezoidal quadrature on the stored time grid; the damped trace must
    have fallen below ``1e-6`` at the last time point.
    """
    t = trace.times
    tail = math.exp(trace.log_magnitude[-1] - eta * t[-1])
    if tail >= 1e-6:
        raise WindowTooWeak(
            f"|v(t_max)| exp(-eta t_max) = {tail:.2e} >= 1e-6; extend the trace or increase eta"
        )
    if omega_grid is None:
        dt = float(np.min(np.diff(t)))
        # one full period with more nodes than time samples keeps the sum rule exact
        omega_grid = np.linspace(-np.pi / dt, np.pi / dt, max(4001, t.size + 2))
    omega = np.asarray(omega_grid, dtype=float)
    weighted = trapezoid_weights(t) * np.exp(-eta * t) * trace.values
    out = np.empty(omega.size)
    chunk = max(1, 2_000_000 // max(t.size, 1))
    for s in range(0, omega.size, chunk):
        om = omega[s : s + chunk]
        out[s : s + chunk] = (np.exp(-1j * np.outer(om, t)) @ weighted).real / np.pi
    regime = dict(trace.regime)
    regime["eta"] = eta
    return Spectrum(omega, out, eta, regime)


# ---------------------------------------------------------------------------
# thermodynamic limit


def converge_thermodynamic(
    kind: GeometryKind | str,
    temperature: float,
    coupling: CouplingSpec | float,
    t_grid,
    tol: float = 1e-3,
    start: int = 100,
    max_doublings: int = 6,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[DecoherenceTrace, int]:
    """Double the shell count until successive traces agree within ``tol``.

    Returns the last trace and the shell count that produced it.
    """
    if not isinstance(coupling, CouplingSpec):
        coupling = CouplingSpec(coupling)
    previous = None
    shells = start
    for _ in range(max_doublings + 1):
        trace = exact_trace(Geometry.make(kind, shells), coupling.kFa, temperature, t_grid, epsilon)
        if previous is not None and np.max(np.abs(trace.values - previous.values)) < tol:
            return trace, shells
        previous = trace
        shells *= 2
    raise NonConvergence(f"trace not converged to {tol} after {max_doublings} doublings")
