"""Temperature-estimation figures of merit from decoherence traces.

For a qubit with equatorial Bloch vector ``v = |v| e^{i phi}`` the quantum
Fisher information about ``T`` splits into a purity term and a phase term,

    F_par = (d|v|/dT)^2 / (1 - |v|^2),    F_perp = |v|^2 (dphi/dT)^2,

and the QSNR is ``T sqrt(F_par + F_perp)``. Derivatives are central finite
differences at ``T (1 +- dT/T)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .basis import DEFAULT_EPSILON, CouplingSpec, Geometry, prepare
from .errors import BranchMisalignment, DegenerateOutcome, ExtendGrid, UndefinedAngle
from .levitov import DecoherenceTrace, decoherence_at, decoherence_functions
from .weakcoupling import WeakCouplingModel, approx_decoherence

DELTA_T_REL = 1e-2
PURITY_FLOOR = 1e-12


class Channel(Protocol):
    name: str
    kFa: float

    def traces(self, temperatures: Sequence[float], t_grid) -> list[DecoherenceTrace]: ...


@dataclass
class ExactChannel:
    """Determinant engine on a 3D box (or any :class:`Geometry`).

    All temperatures requested together share one truncated basis, so
    finite differences in ``T`` see identical Hilbert spaces.
    """

    kFa: float
    geometry: Geometry | None = None
    epsilon: float = DEFAULT_EPSILON
    min_shells: int = 200
    name: str = "exact"

    def geometry_for(self, t_end: float) -> Geometry:
        if self.geometry is not None:
            return self.geometry
        # revival time of the 3D box is pi N_s; keep it at least twice the window
        shells = max(self.min_shells, int(math.ceil(2 * t_end / math.pi / 50.0)) * 50)
        return Geometry.box3d(shells)

    def traces(self, temperatures, t_grid) -> list[DecoherenceTrace]:
        t = np.asarray(t_grid, dtype=float)
        geometry = self.geometry_for(float(t[-1]))
        basis, thermals = prepare(geometry, CouplingSpec(self.kFa), list(temperatures), self.epsilon)
        return decoherence_functions(basis, thermals, t)

    def values_at(self, temperatures, t: float) -> np.ndarray:
        """Complex ``v(t)`` at one time for several temperatures sharing a basis."""
        geometry = self.geometry_for(float(t))
        basis, thermals = prepare(geometry, CouplingSpec(self.kFa), list(temperatures), self.epsilon)
        return decoherence_at(basis, thermals, t)


@dataclass
class WeakChannel:
    """Closed-form weak-coupling traces."""

    kFa: float
    cutoff_Lambda: float = 1.0
    exponent: str = "weak"
    include_phi: bool = False
    name: str = "weak"

    def model(self, temperature: float) -> WeakCouplingModel:
        return WeakCouplingModel(self.kFa, temperature, None, self.cutoff_Lambda, self.exponent)

    def traces(self, temperatures, t_grid) -> list[DecoherenceTrace]:
        return [approx_decoherence(t_grid, self.model(T), self.include_phi) for T in temperatures]

    def values_at(self, temperatures, t: float) -> np.ndarray:
        return np.array([approx_decoherence(np.array([0.0, t]), self.model(T), self.include_phi).values[1] for T in temperatures])


@dataclass(frozen=True, eq=False)
class Derivatives:
    trace: DecoherenceTrace
    d_abs_dT: np.ndarray
    d_phase_dT: np.ndarray
    delta_T_rel: float


def temperature_derivatives(
    channel: Channel, temperature: float, t_grid, delta_T_rel: float = DELTA_T_REL
) -> Derivatives:
    """Central differences of ``|v|`` and the unwrapped phase in ``T``.

    Both phase traces start at ``phi(0) = 0``; if they then drift more than
    ``pi/2`` apart the branches are considered misaligned.
    """
    lo, hi = temperature * (1 - delta_T_rel), temperature * (1 + delta_T_rel)
    tr_lo, tr_mid, tr_hi = channel.traces([lo, temperature, hi], t_grid)
    gap = np.abs(tr_hi.phase - tr_lo.phase)
    if gap.size and gap.max() > math.pi / 2:
        i = int(np.argmax(gap))
        raise BranchMisalignment(f"phases at T(1 +- dT) differ by {gap[i]:.3f} rad at t = {tr_mid.times[i]:g}")
    d_abs = (tr_hi.magnitude - tr_lo.magnitude) / (hi - lo)
    d_phase = (tr_hi.phase - tr_lo.phase) / (hi - lo)
    return Derivatives(tr_mid, d_abs, d_phase, delta_T_rel)


def qfi(abs_v, d_abs_dT, d_phase_dT):
    """``(F_par, F_perp, F_Q)``; ``F_par`` and ``F_Q`` are NaN where ``1 - |v|^2 < 1e-12``."""
    abs_v = np.asarray(abs_v, dtype=float)
    d_abs_dT = np.asarray(d_abs_dT, dtype=float)
    d_phase_dT = np.asarray(d_phase_dT, dtype=float)
    purity_gap = 1.0 - abs_v**2
    singular = purity_gap < PURITY_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        f_par = np.where(singular, np.nan, d_abs_dT**2 / np.where(singular, 1.0, purity_gap))
    f_perp = abs_v**2 * d_phase_dT**2
    return f_par, f_perp, f_par + f_perp


def sld_angle(abs_v, d_abs_dT, d_phase_dT, form: str = "corrected"):
    """Angle ``varphi`` of the SLD relative to the Bloch vector.

    ``tan varphi = |v| (1 - |v|^2) dphi/dT / (d|v|/dT)``. ``form="printed"``
    uses ``(1 - |v|)^2`` in place of ``1 - |v|^2`` for comparison; only the
    corrected form attains the QFI.
    """
    abs_v = np.asarray(abs_v, dtype=float)
    factor = (1 - abs_v**2) if form == "corrected" else (1 - abs_v) ** 2
    if form not in ("corrected", "printed"):
        raise ValueError(f"unknown form {form!r}")
    y = abs_v * factor * np.asarray(d_phase_dT, dtype=float)
    x = np.asarray(d_abs_dT, dtype=float)
    if np.any((np.abs(y) < 1e-14) & (np.abs(x) < 1e-14)):
        raise UndefinedAngle("no temperature sensitivity: SLD direction undefined")
    return np.arctan2(y, x)


def complex_derivative(abs_v, phase, d_abs_dT, d_phase_dT):
    """``dv/dT`` from polar derivatives."""
    return (np.asarray(d_abs_dT) + 1j * np.asarray(abs_v) * np.asarray(d_phase_dT)) * np.exp(1j * np.asarray(phase))


def sld_direction(v: complex, dv_dT: complex) -> float:
    """Pulse phase ``theta* = phi + varphi`` whose readout attains the QFI."""
    phi = float(np.angle(v))
    rotated = dv_dT * np.exp(-1j * phi)
    return phi + float(sld_angle(abs(v), rotated.real, rotated.imag / abs(v)))


def fisher_of_equatorial_measurement(v, dv_dT, theta):
    """Fisher information of the two-outcome measurement along ``theta``.

    ``F = (dX/dT)^2 / (1 - X^2)`` with ``X = cos(theta) Re v + sin(theta) Im v``.
    """
    v = np.asarray(v, dtype=complex)
    dv = np.asarray(dv_dT, dtype=complex)
    c, s = np.cos(theta), np.sin(theta)
    x = c * v.real + s * v.imag
    dx = c * dv.real + s * dv.imag
    gap = 1.0 - x**2
    if np.any(gap < PURITY_FLOOR):
        raise DegenerateOutcome("measurement outcome is deterministic (1 - X^2 < 1e-12)")
    return dx**2 / gap


@dataclass(frozen=True)
class QsnrOptimum:
    t_max: float
    Q_max: float
    t_grid_max: float
    Q_grid_max: float


def maximize_qsnr(times, qsnr) -> QsnrOptimum:
    """Grid argmax of the QSNR refined by a three-point parabola.

    Raises :class:`ExtendGrid` when the maximum sits at either end of the grid.
    """
    t = np.asarray(times, dtype=float)
    q = np.nan_to_num(np.asarray(qsnr, dtype=float), nan=-np.inf)
    i = int(np.argmax(q))
    if i == t.size - 1 or q[-1] >= q[-2]:
        raise ExtendGrid(f"QSNR still rising at t = {t[-1]:g}; extend the time grid")
    if i == 0:
        raise ExtendGrid("QSNR maximum at the first grid point; refine or shift the grid")
    t0, t1, t2 = t[i - 1 : i + 2]
    q0, q1, q2 = q[i - 1 : i + 2]
    # vertex of the parabola through three (possibly unequally spaced) points
    d01, d12 = (q1 - q0) / (t1 - t0), (q2 - q1) / (t2 - t1)
    curv = (d12 - d01) / (t2 - t0)
    if curv >= 0 or not np.isfinite(curv):
        return QsnrOptimum(float(t1), float(q1), float(t1), float(q1))
    tv = 0.5 * (t0 + t1) - d01 / (2 * curv)
    tv = min(max(tv, t0), t2)
    qv = q0 + d01 * (tv - t0) + curv * (tv - t0) * (tv - t1)
    return QsnrOptimum(float(tv), float(max(qv, q1)), float(t1), float(q1))


@dataclass(frozen=True, eq=False)
class MetrologyResult:
    times: np.ndarray
    abs_v: np.ndarray
    phase: np.ndarray
    d_abs_dT: np.ndarray
    d_phase_dT: np.ndarray
    F_parallel: np.ndarray
    F_perp: np.ndarray
    F_Q: np.ndarray
    QSNR: np.ndarray
    sld_angle_varphi: np.ndarray
    t_max: float
    Q_max: float
    temperature: float
    kFa: float
    channel: str
    optimum: QsnrOptimum | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.abs_v * np.exp(1j * self.phase)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_over_tauF", "abs_v", "phase", "F_par", "F_perp", "F_Q", "QSNR"])
            for row in zip(self.times, self.abs_v, self.phase, self.F_parallel, self.F_perp, self.F_Q, self.QSNR):
                w.writerow([f"{x:.12g}" for x in row])
        return path

    def summary(self) -> dict:
        def finite(x):
            return float(x) if math.isfinite(x) else None

        return {
            "T": self.temperature,
            "kFa": self.kFa,
            "t_max": finite(self.t_max),
            "Q_max": finite(self.Q_max),
            "channel": self.channel,
        }

    def summary_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


def metrology_from_derivatives(
    der: Derivatives, temperature: float, kFa: float, channel: str, quantity: str = "F_Q", require_peak: bool = True
) -> MetrologyResult:
    tr = der.trace
    f_par, f_perp, f_q = qfi(tr.magnitude, der.d_abs_dT, der.d_phase_dT)
    source = {"F_Q": f_q, "F_perp": f_perp}[quantity]
    qsnr = temperature * np.sqrt(source)
    if tr.times[0] == 0:
        qsnr[0] = 0.0
    mag = tr.magnitude
    sensitive = (np.abs(mag * (1 - mag**2) * der.d_phase_dT) >= 1e-14) | (np.abs(der.d_abs_dT) >= 1e-14)
    angle = np.full(tr.times.shape, np.nan)
    angle[sensitive] = sld_angle(tr.magnitude[sensitive], der.d_abs_dT[sensitive], der.d_phase_dT[sensitive])
    opt = None
    t_max = q_max = math.nan
    try:
        opt = maximize_qsnr(tr.times, qsnr)
        t_max, q_max = opt.t_max, opt.Q_max
    except ExtendGrid:
        if require_peak:
            raise
    return MetrologyResult(
        tr.times, tr.magnitude, tr.phase, der.d_abs_dT, der.d_phase_dT, f_par, f_perp, f_q, qsnr, angle,
        t_max, q_max, temperature, kFa, channel, opt,
        {"delta_T_rel": der.delta_T_rel, "quantity": quantity, **tr.regime},
    )


def compute_metrology(
    channel: Channel,
    temperature: float,
    t_grid,
    delta_T_rel: float = DELTA_T_REL,
    quantity: str = "F_Q",
    require_peak: bool = True,
) -> MetrologyResult:
    """Full pipeline: traces at ``T (1 +- dT)``, QFI, QSNR and its optimum.

    ``quantity="F_perp"`` builds the QSNR from the phase term only, which is
    the quantity the closed-form weak-coupling optimum describes.
    """
    der = temperature_derivatives(channel, temperature, t_grid, delta_T_rel)
    return metrology_from_derivatives(der, temperature, channel.kFa, channel.name, quantity, require_peak)


def derivative_step_sensitivity(channel: Channel, temperature: float, t: float, t_grid) -> float:
    """Relative change of ``F_Q`` at time ``t`` when ``dT/T`` is halved from 1e-2."""
    grid = np.asarray(t_grid, dtype=float)
    j = int(np.argmin(np.abs(grid - t)))
    full = temperature_derivatives(channel, temperature, grid, DELTA_T_REL)
    half = temperature_derivatives(channel, temperature, grid, DELTA_T_REL / 2)
    fq_full = qfi(full.trace.magnitude, full.d_abs_dT, full.d_phase_dT)[2][j]
    fq_half = qfi(half.trace.magnitude, half.d_abs_dT, half.d_phase_dT)[2][j]
    return abs(fq_half - fq_full) / abs(fq_full)


def search_optimum(
    channel: Channel,
    temperature: float,
    step: float = 0.5,
    stop: float = 100.0,
    max_stop: float = 1500.0,
    quantity: str = "F_Q",
) -> MetrologyResult:
    """:func:`compute_metrology` on ``[0, stop]``, doubling ``stop`` until the QSNR peak is interior."""
    while True:
        grid = step * np.arange(int(round(stop / step)) + 1)
        try:
            return compute_metrology(channel, temperature, grid, quantity=quantity)
        except ExtendGrid:
            if 2 * stop > max_stop:
                raise
            stop *= 2
