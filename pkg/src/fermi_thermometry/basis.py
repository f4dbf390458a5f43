"""Single-particle eigenbases of the Fermi gas with and without the impurity.

Natural Fermi units are used throughout: ``E_F = hbar = k_B = k_F = 1`` and
``hbar^2 / 2m = 1``, so a plane wave of wavevector ``k`` has energy ``k**2``,
times are in units of ``tau_F`` and temperatures in units of ``T_F``.

Three geometries are supported.  Only the sector that couples to a contact
impurity at the origin is kept:

* ``box3d_swave``: hard-wall sphere of radius ``R = pi * N_s`` (s-waves).
* ``box1d_even``: hard-wall segment ``[-L/2, L/2]`` with ``L = (2 N_e - 1) pi``
  (even states).
* ``harmonic1d_even``: harmonic trap with ``omega_0 = 1 / (2 N_e - 3/2)``
  (even oscillator states).

The pipeline is ``solve_scattering_sector -> build_overlap_matrix ->
solve_chemical_potential -> truncate``; :func:`prepare` runs it with an
automatically sized basis.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, special

from .errors import (
    BracketFailure,
    ConvergenceFailure,
    DimensionMismatch,
    InvalidCoupling,
    NoConvergence,
    TruncationOverflow,
    UnitarityViolation,
)

DEFAULT_EPSILON = 1e-4
MU_BRACKET = (-10.0, 10.0)
MU_TOLERANCE = 1e-8
N_AUX_DEFAULT = 10_000
# the level at E_F counts as half occupied in the smoothed staircase
FERMI_LEVEL_OFFSET = 0.5


class GeometryKind(str, Enum):
    BOX3D_SWAVE = "box3d_swave"
    BOX1D_EVEN = "box1d_even"
    HARMONIC1D_EVEN = "harmonic1d_even"


@dataclass(frozen=True)
class Geometry:
    """Confinement of the gas.

    ``size_parameter`` is ``R k_F`` (3D box), ``L k_F`` (1D box) or
    ``hbar omega_0 / E_F`` (harmonic trap). It is tied to ``shell_count`` so
    that the Fermi energy stays at one; use the ``box3d``/``box1d``/
    ``harmonic1d`` constructors rather than passing it by hand.
    """

    kind: GeometryKind
    size_parameter: float
    shell_count: int

    def __post_init__(self):
        object.__setattr__(self, "kind", GeometryKind(self.kind))
        if not self.shell_count >= 1 or int(self.shell_count) != self.shell_count:
            raise ValueError(f"shell_count must be a positive integer, got {self.shell_count}")
        object.__setattr__(self, "shell_count", int(self.shell_count))
        if not self.size_parameter > 0:
            raise ValueError(f"size_parameter must be positive, got {self.size_parameter}")
        expected = _size_for(self.kind, self.shell_count)
        if not math.isclose(self.size_parameter, expected, rel_tol=1e-12):
            raise ValueError(
                f"{self.kind.value}: size_parameter {self.size_parameter!r} does not keep "
                f"E_F = 1 for shell_count {self.shell_count} (expected {expected!r})"
            )

    @classmethod
    def box3d(cls, shell_count: int) -> "Geometry":
        return cls(GeometryKind.BOX3D_SWAVE, _size_for(GeometryKind.BOX3D_SWAVE, shell_count), shell_count)

    @classmethod
    def box1d(cls, shell_count: int) -> "Geometry":
        return cls(GeometryKind.BOX1D_EVEN, _size_for(GeometryKind.BOX1D_EVEN, shell_count), shell_count)

    @classmethod
    def harmonic1d(cls, shell_count: int) -> "Geometry":
        return cls(
            GeometryKind.HARMONIC1D_EVEN,
            _size_for(GeometryKind.HARMONIC1D_EVEN, shell_count),
            shell_count,
        )

    @classmethod
    def harmonic1d_from_omega(cls, omega0: float) -> "Geometry":
        """Trap with the even-sector atom number closest to ``omega0``.

        ``omega0 (2 N_e - 3/2) = 1`` rarely has an integer solution, so the
        returned trap frequency is the one implied by the rounded ``N_e``.
        """
        n_e = max(1, int(round((1.0 / omega0 + 1.5) / 2.0)))
        return cls.harmonic1d(n_e)

    @classmethod
    def make(cls, kind: GeometryKind | str, shell_count: int) -> "Geometry":
        kind = GeometryKind(kind)
        return cls(kind, _size_for(kind, shell_count), shell_count)

    @property
    def dimension(self) -> int:
        return 3 if self.kind is GeometryKind.BOX3D_SWAVE else 1

    @property
    def label(self) -> str:
        return f"{self.kind.value}[{self.shell_count}]"

    def wavevectors(self, n: int) -> np.ndarray:
        """Unperturbed wavevectors of the first ``n`` box states."""
        idx = np.arange(1, n + 1, dtype=float)
        if self.kind is GeometryKind.BOX3D_SWAVE:
            return idx * np.pi / self.size_parameter
        if self.kind is GeometryKind.BOX1D_EVEN:
            return (2.0 * idx - 1.0) * np.pi / self.size_parameter
        raise TypeError("harmonic states have no single wavevector")

    def unperturbed_energies(self, n: int) -> np.ndarray:
        if self.kind is GeometryKind.HARMONIC1D_EVEN:
            return self.size_parameter * (2.0 * np.arange(n, dtype=float) + 0.5)
        return self.wavevectors(n) ** 2

    def states_below(self, energy: float) -> int:
        """Number of unperturbed states with energy below ``energy``."""
        if energy <= 0:
            return 0
        if self.kind is GeometryKind.BOX3D_SWAVE:
            return int(math.floor(math.sqrt(energy) * self.size_parameter / np.pi))
        if self.kind is GeometryKind.BOX1D_EVEN:
            return int(math.floor((math.sqrt(energy) * self.size_parameter / np.pi + 1.0) / 2.0))
        return int(math.floor((energy / self.size_parameter - 0.5) / 2.0)) + 1

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "size_parameter": self.size_parameter, "shell_count": self.shell_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(GeometryKind(d["kind"]), float(d["size_parameter"]), int(d["shell_count"]))


def _size_for(kind: GeometryKind, shell_count: int) -> float:
    if kind is GeometryKind.BOX3D_SWAVE:
        return np.pi * shell_count
    if kind is GeometryKind.BOX1D_EVEN:
        return (2 * shell_count - 1) * np.pi
    return 1.0 / (2 * shell_count - 1.5)


@dataclass(frozen=True)
class CouplingSpec:
    """Impurity-gas coupling ``k_F a`` (attractive branch in 3D, ``a < 0``).

    In 1D the contact strength is ``lambda = -hbar^2 / (m a) = -2 / a``, so
    ``a < 0`` is a repulsive delta and ``a -> 0^-`` is the hard-wall limit.
    """

    kFa: float

    def __post_init__(self):
        kfa = float(self.kFa)
        if not math.isfinite(kfa) or kfa >= 0:
            raise InvalidCoupling(f"k_F a must be finite and strictly negative, got {self.kFa!r}")
        object.__setattr__(self, "kFa", kfa)

    @property
    def alpha(self) -> float:
        """Weak-coupling exponent ``(k_F a / pi)^2``."""
        return (self.kFa / np.pi) ** 2

    @property
    def contact_strength(self) -> float:
        """1D delta strength ``lambda`` in units of ``E_F / k_F``."""
        return -2.0 / self.kFa

    def fermi_phase(self, geometry: "Geometry | None" = None) -> float:
        """Scattering phase at the Fermi surface."""
        if geometry is not None and geometry.dimension == 1:
            return float(np.arctan(1.0 / self.kFa))
        return float(-np.arctan(self.kFa))


def _readonly(a, dtype=None):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Unperturbed and perturbed single-particle spectra and their overlaps.

    ``overlap[m, n] = <psi_m | psi'_n>``. After :func:`truncate`, ``n_kept``
    and ``n_perturbed`` record ``N`` and ``N'`` and the arrays have been cut to
    those sizes.
    """

    unperturbed_energies: np.ndarray
    perturbed_energies: np.ndarray
    scattering_phases: np.ndarray | None = None
    overlap: np.ndarray | None = None
    geometry: Geometry | None = None
    coupling: CouplingSpec | None = None
    epsilon: float | None = None
    n_kept: int | None = None
    n_perturbed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "unperturbed_energies", _readonly(self.unperturbed_energies, float))
        object.__setattr__(self, "perturbed_energies", _readonly(self.perturbed_energies, float))
        object.__setattr__(self, "scattering_phases", _readonly(self.scattering_phases, float))
        object.__setattr__(self, "overlap", _readonly(self.overlap))
        if self.overlap is not None:
            if self.overlap.ndim != 2 or self.overlap.shape[1] != self.perturbed_energies.size:
                raise DimensionMismatch(
                    f"overlap shape {self.overlap.shape} does not match "
                    f"{self.perturbed_energies.size} perturbed states"
                )
            if self.overlap.shape[0] > self.unperturbed_energies.size:
                raise DimensionMismatch("overlap has more rows than unperturbed states")

    @property
    def is_truncated(self) -> bool:
        return self.n_kept is not None

    @property
    def is_real(self) -> bool:
        return self.overlap is not None and not np.iscomplexobj(self.overlap)

    @classmethod
    def from_hamiltonians(cls, h0: np.ndarray, h1: np.ndarray) -> "BasisSet":
        """Basis from explicit single-particle Hamiltonian matrices.

        Used for small toy problems where the many-body trace can be checked
        directly. The returned basis is square and exactly unitary.
        """
        e0, p = np.linalg.eigh(np.asarray(h0))
        e1, q = np.linalg.eigh(np.asarray(h1))
        u = p.conj().T @ q
        if not np.iscomplexobj(h0) and not np.iscomplexobj(h1):
            u = u.real
        n = e0.size
        return cls(e0, e1, overlap=u, n_kept=n, n_perturbed=n, epsilon=0.0)


@dataclass(frozen=True, eq=False)
class ThermalState:
    """Grand-canonical occupations of the unperturbed levels.

    ``occupations`` is aligned with the ``unperturbed_energies`` of the basis
    it was computed for.
    """

    temperature: float
    chemical_potential: float
    occupations: np.ndarray
    shell_count: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "occupations", _readonly(self.occupations, float))


def fermi_function(energies, mu: float, temperature: float) -> np.ndarray:
    """``1 / (exp((E - mu)/T) + 1)`` evaluated without overflow."""
    return special.expit(-(np.asarray(energies, dtype=float) - mu) / temperature)


# ---------------------------------------------------------------------------
# scattering sector


def _bisect_increasing(func, lo, hi, max_iter=200):
    """Vectorised bisection for functions increasing on ``(lo, hi)``.

    Only midpoints are evaluated, so the endpoints may be singular.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = func(mid) < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        width = hi - lo
        if np.all(width <= 4.0 * np.finfo(float).eps * np.maximum(np.abs(mid), 1e-300)):
            return 0.5 * (lo + hi)
    raise NoConvergence(f"bisection did not converge in {max_iter} iterations")


def solve_scattering_sector(geometry: Geometry, coupling: CouplingSpec, n_max: int) -> BasisSet:
    """Perturbed wavevectors and scattering phases of a hard-wall box.

    3D: ``k'_n R + delta_n = n pi`` with ``tan(delta_n) = -k'_n a``, each
    phase bracketed in ``(0, pi/2)``.

    1D: ``k'_n L + 2 delta_n = (2n - 1) pi`` with ``tan(delta_n) = 1/(k'_n a)``,
    each phase bracketed in ``(-pi/2, 0)``.

    The harmonic trap has no closed-form scattering condition; use
    :func:`build_harmonic_sector`.
    """
    if not isinstance(coupling, CouplingSpec):
        coupling = CouplingSpec(coupling)
    if n_max < geometry.shell_count:
        raise ValueError(f"n_max={n_max} is smaller than shell_count={geometry.shell_count}")
    a = coupling.kFa
    size = geometry.size_parameter
    n = np.arange(1, n_max + 1, dtype=float)

    if geometry.kind is GeometryKind.BOX3D_SWAVE:
        def residual(d):
            return d - np.arctan(-a * (n * np.pi - d) / size)

        delta = _bisect_increasing(residual, np.zeros(n_max), np.full(n_max, np.pi / 2))
        kp = (n * np.pi - delta) / size
        check = np.sin(delta) + kp * a * np.cos(delta)
    elif geometry.kind is GeometryKind.BOX1D_EVEN:
        def residual(d):
            kp = ((2 * n - 1) * np.pi - 2 * d) / size
            return d - np.arctan(1.0 / (a * kp))

        delta = _bisect_increasing(residual, np.full(n_max, -np.pi / 2), np.zeros(n_max))
        kp = ((2 * n - 1) * np.pi - 2 * delta) / size
        check = a * kp * np.sin(delta) - np.cos(delta)
    else:
        raise TypeError("use build_harmonic_sector for the harmonic trap")

    if np.max(np.abs(check) / (1.0 + np.abs(a * kp))) > 1e-10:
        raise NoConvergence("scattering condition residual too large after bisection")

    return BasisSet(
        unperturbed_energies=geometry.unperturbed_energies(n_max),
        perturbed_energies=kp**2,
        scattering_phases=delta,
        geometry=geometry,
        coupling=coupling,
    )


def overlap_box(geometry: Geometry, k: np.ndarray, kp: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Closed-form ``<psi_m | psi'_n>`` for the hard-wall boxes.

    3D: ``2 A_n sin(delta_n) k_m / (R (k_m^2 - k'_n^2))`` with
    ``A_n = [1 + sin(2 delta_n) / (2 k'_n R)]^{-1/2}``.

    1D: ``4 B_n sin(delta_n) k'_n / (L (k_m^2 - k'_n^2))`` with
    ``B_n = [1 - sin(2 delta_n) / (k'_n L)]^{-1/2}``.

    The boundary conditions make the surface terms vanish, leaving these
    one-term expressions; ``k'_n`` never coincides with ``k_m`` for ``a < 0``.
    ``k`` and ``kp`` must be the full ladders starting at ``n = 1``.
    """
    k = np.asarray(k, dtype=float)[:, None]
    kp_row = np.asarray(kp, dtype=float)[None, :]
    d = np.asarray(delta, dtype=float)[None, :]
    size = geometry.size_parameter
    # k_m - k'_n from the quantisation conditions; the direct difference
    # cancels catastrophically on the diagonal when delta is tiny
    steps = (np.arange(k.shape[0])[:, None] - np.arange(kp_row.shape[1])[None, :]) * np.pi
    if geometry.kind is GeometryKind.BOX3D_SWAVE:
        gap = (steps + d) / size
    else:
        gap = 2.0 * (steps + d) / size
    denom = gap * (k + kp_row)
    if geometry.kind is GeometryKind.BOX3D_SWAVE:
        norm = 1.0 / np.sqrt(1.0 + np.sin(2 * d) / (2 * kp_row * size))
        return 2.0 * norm * np.sin(d) * k / (size * denom)
    if geometry.kind is GeometryKind.BOX1D_EVEN:
        norm = 1.0 / np.sqrt(1.0 - np.sin(2 * d) / (kp_row * size))
        return 4.0 * norm * np.sin(d) * kp_row / (size * denom)
    raise TypeError("overlap_box only handles box geometries")


def build_overlap_matrix(basis: BasisSet, epsilon: float = DEFAULT_EPSILON) -> BasisSet:
    """Fill ``basis.overlap`` with the square closed-form overlap matrix.

    Rows of the zero-temperature Fermi sea (``m <= shell_count``) must already
    satisfy the unitarity bound, otherwise :class:`UnitarityViolation`.
    """
    geometry = basis.geometry
    if geometry is None or basis.scattering_phases is None:
        raise ValueError("basis needs a box geometry and solved scattering phases")
    n_max = basis.perturbed_energies.size
    k = geometry.wavevectors(basis.unperturbed_energies.size)
    kp = np.sqrt(basis.perturbed_energies)
    u = overlap_box(geometry, k, kp, basis.scattering_phases)
    rows = np.sum(u[: geometry.shell_count] ** 2, axis=1)
    if n_max > geometry.shell_count and np.any(rows <= 1.0 - epsilon):
        bad = int(np.argmin(rows))
        raise UnitarityViolation(
            f"row {bad + 1} of the overlap matrix sums to {rows[bad]:.8f} <= 1 - {epsilon}; increase n_max"
        )
    return replace(basis, overlap=u)


# ---------------------------------------------------------------------------
# harmonic trap


def harmonic_origin_amplitudes(omega0: float, n: int) -> np.ndarray:
    """Even oscillator eigenfunctions at the origin, ``phi_{2m}(0)``."""
    ell = math.sqrt(2.0 / omega0)
    m = np.arange(n, dtype=float)
    ratio = np.exp(special.gammaln(m + 0.5) - special.gammaln(m + 1.0))
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return sign * np.sqrt(ratio / (np.pi * ell))


def _gamma_ratio(nu):
    return np.exp(special.gammaln(nu + 0.5) - special.gammaln(nu + 1.0))


def harmonic_green_origin(energy, omega0: float):
    """``sum_m phi_{2m}(0)^2 / (E - E_m)`` summed over the whole even sector.

    Closed form ``cot(pi nu) Gamma(nu+1/2) / (2 omega_0 l Gamma(nu+1))`` with
    ``nu = (E - omega_0/2) / (2 omega_0)`` and ``l = sqrt(2/omega_0)``.
    """
    ell = math.sqrt(2.0 / omega0)
    nu = (np.asarray(energy, dtype=float) - 0.5 * omega0) / (2.0 * omega0)
    return _gamma_ratio(nu) / np.tan(np.pi * nu) / (2.0 * omega0 * ell)


def _harmonic_green_slope(nu, omega0, frac=None):
    """``sum_m phi_{2m}(0)^2 / (E - E_m)^2`` at ``E = omega_0 (2 nu + 1/2)``.

    ``frac`` is the fractional part of ``nu``; passing it keeps the
    trigonometric factors accurate when ``nu`` is large and ``frac`` tiny.
    """
    ell = math.sqrt(2.0 / omega0)
    r = _gamma_ratio(nu)
    phase = np.pi * (nu if frac is None else frac)
    s = np.sin(phase)
    cot = np.cos(phase) / s
    dpsi = special.digamma(nu + 0.5) - special.digamma(nu + 1.0)
    return (np.pi * r / s**2 - cot * r * dpsi) / (4.0 * omega0**2 * ell)


def build_harmonic_sector(
    omega0: float | Geometry,
    coupling: CouplingSpec | float,
    n_max: int,
    method: str = "secular",
    check_convergence: bool = False,
) -> BasisSet:
    """Even sector of a harmonic trap with a contact impurity at the centre.

    ``h_1 = h_0 + lambda |chi><chi|`` in the even oscillator basis, with
    ``chi_m = phi_{2m}(0)``. ``method="secular"`` diagonalises this rank-one
    update exactly: each perturbed level is the root of ``1/lambda = G(E)``
    in its own interval ``(E_n, E_n + omega_0)``, where ``G`` is the
    origin Green's function summed over the complete even sector, and the
    eigenvectors are ``U[m, n] = N_n chi_m / (E'_n - E_m)``.
    ``method="dense"`` diagonalises the ``n_max x n_max`` truncated matrix
    directly; it converges only as ``n_max**-0.5`` and is kept for checks.

    ``scattering_phases`` stores ``-pi x_n`` where ``E'_n = E_n + 2 omega_0 x_n``,
    the analogue of the 1D box phase (``x_n -> 1/2`` in the hard-wall limit).
    """
    if isinstance(omega0, Geometry):
        geometry = omega0
        omega0 = geometry.size_parameter
    else:
        geometry = Geometry.harmonic1d_from_omega(omega0)
        if not math.isclose(geometry.size_parameter, omega0, rel_tol=1e-12):
            geometry = None
    if not isinstance(coupling, CouplingSpec):
        coupling = CouplingSpec(coupling)
    if omega0 > 0.05:
        warnings.warn(f"omega_0 = {omega0} is not small compared with E_F", stacklevel=2)
    lam = coupling.contact_strength
    energies = omega0 * (2.0 * np.arange(n_max, dtype=float) + 0.5)
    chi = harmonic_origin_amplitudes(omega0, n_max)

    if method == "dense":
        e1, u = _dense_harmonic(energies, chi, lam)
        if check_convergence:
            e_big = np.linalg.eigvalsh(
                np.diag(omega0 * (2.0 * np.arange(2 * n_max) + 0.5))
                + lam * np.outer(*(2 * [harmonic_origin_amplitudes(omega0, 2 * n_max)]))
            )
            n_low = min(10, n_max)
            shift = np.max(np.abs(e_big[:n_low] - e1[:n_low]))
            if shift > 1e-6:
                raise ConvergenceFailure(
                    f"low-lying levels move by {shift:.2e} E_F when n_max is doubled"
                )
        x = (e1 - energies) / (2.0 * omega0)
    elif method == "secular":
        c = -coupling.kFa * omega0 * math.sqrt(2.0 / omega0)
        idx = np.arange(n_max, dtype=float)

        def residual(x):
            # increasing in x on (0, 1/2)
            return c - _gamma_ratio(idx + x) / np.tan(np.pi * x)

        x = _bisect_increasing(residual, np.zeros(n_max), np.full(n_max, 0.5))
        nu = idx + x
        e1 = omega0 * (2.0 * nu + 0.5)
        # sign(chi_n) fixes the eigenvector phase so that U -> identity as lambda -> 0
        norm = np.sign(chi) / np.sqrt(_harmonic_green_slope(nu, omega0, x))
        gap = 2.0 * omega0 * ((idx[None, :] - idx[:, None]) + x[None, :])
        u = chi[:, None] * norm[None, :] / gap
    else:
        raise ValueError(f"unknown method {method!r}")

    return BasisSet(
        unperturbed_energies=energies,
        perturbed_energies=e1,
        scattering_phases=-np.pi * x,
        overlap=u,
        geometry=geometry,
        coupling=coupling,
    )


def _dense_harmonic(energies, chi, lam):
    h1 = np.diag(energies) + lam * np.outer(chi, chi)
    e1, u = np.linalg.eigh(h1)
    # fix the arbitrary eigenvector sign so the diagonal is positive
    signs = np.sign(np.diagonal(u))
    signs[signs == 0] = 1.0
    return e1, u * signs[None, :]


# ---------------------------------------------------------------------------
# thermal state


def auxiliary_energies(geometry: Geometry, temperature: float, n_aux: int | None = None) -> np.ndarray:
    """Large unperturbed spectrum used to pin the chemical potential."""
    needed = geometry.states_below(MU_BRACKET[1] + 40.0 * temperature) + 1
    n = max(n_aux or N_AUX_DEFAULT, needed)
    return geometry.unperturbed_energies(n)


def solve_chemical_potential(
    basis: BasisSet | Geometry,
    temperature: float,
    shell_count: float | None = None,
    n_aux: int | None = None,
) -> ThermalState:
    """Chemical potential fixing the mean particle number of the sector.

    Solves ``sum_n f(E_n) = shell_count`` on an auxiliary spectrum of at least
    ``10^4`` states, bracketed in ``[-10, 10] E_F``. The returned occupations
    are aligned with ``basis.unperturbed_energies`` (or with the auxiliary
    spectrum when a bare :class:`Geometry` is passed).

    By default ``shell_count`` is the geometry's ``N_s - 1/2``: the level
    staircase of every supported geometry averages to ``N(E_F = 1) = N_s - 1/2``,
    so this filling puts the smoothed Fermi energy exactly at one and
    ``mu -> 1`` as ``T -> 0``. Filling ``N_s`` instead raises ``k_F`` by
    ``1/(2 N_s)``, which shows up as an ``O(t/N_s)`` phase drift.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(basis, Geometry):
        geometry, energies = basis, None
    else:
        geometry, energies = basis.geometry, basis.unperturbed_energies
    if shell_count is None:
        if geometry is None:
            raise ValueError("shell_count is required for a basis without geometry")
        shell_count = geometry.shell_count - FERMI_LEVEL_OFFSET
    aux = auxiliary_energies(geometry, temperature, n_aux) if geometry is not None else energies
    if energies is None:
        energies = aux

    def excess(mu):
        return float(np.sum(fermi_function(aux, mu, temperature))) - shell_count

    lo, hi = MU_BRACKET
    f_lo, f_hi = excess(lo), excess(hi)
    if not (f_lo < 0 < f_hi):
        raise BracketFailure(
            f"occupation sum does not straddle {shell_count} on mu in [{lo}, {hi}] "
            f"(excess {f_lo:.3g} .. {f_hi:.3g}) at T = {temperature}"
        )
    mu = optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(excess(mu)) >= MU_TOLERANCE:
        raise BracketFailure(f"chemical potential solve reached |excess| = {abs(excess(mu)):.2e}")
    return ThermalState(
        temperature=float(temperature),
        chemical_potential=float(mu),
        occupations=fermi_function(energies, mu, temperature),
        shell_count=shell_count,
    )


def occupied_count(thermal: ThermalState, epsilon: float = DEFAULT_EPSILON) -> int:
    """Smallest ``N`` with ``|sum_{n<=N} f_n - shell_count| < epsilon``."""
    partial = np.cumsum(thermal.occupations)
    ok = np.nonzero(np.abs(partial - thermal.shell_count) < epsilon)[0]
    if ok.size == 0:
        raise TruncationOverflow(
            f"{thermal.occupations.size} levels hold only {partial[-1]:.6f} of "
            f"{thermal.shell_count} particles; enlarge the basis"
        )
    return int(ok[0]) + 1


def truncate(
    basis: BasisSet,
    thermal: ThermalState | Sequence[ThermalState],
    epsilon: float = DEFAULT_EPSILON,
) -> BasisSet:
    """Cut the basis to the ``N x N'`` block that carries the determinant.

    ``N`` is the smallest count whose occupations add up to the particle
    number within ``epsilon`` (the largest over several thermal states), and
    ``N'`` the smallest count for which every retained row of the overlap
    matrix has norm above ``1 - epsilon``.
    """
    thermals = [thermal] if isinstance(thermal, ThermalState) else list(thermal)
    if basis.overlap is None:
        raise ValueError("build the overlap matrix before truncating")
    n_keep = max(occupied_count(th, epsilon) for th in thermals)
    if n_keep > basis.overlap.shape[0]:
        raise TruncationOverflow(f"N = {n_keep} exceeds the {basis.overlap.shape[0]} available rows")
    rows = np.abs(basis.overlap[:n_keep]) ** 2
    worst = np.min(np.cumsum(rows, axis=1), axis=0)
    ok = np.nonzero(worst > 1.0 - epsilon)[0]
    if ok.size == 0:
        raise TruncationOverflow(
            f"unitarity bound 1 - {epsilon} not reached within n_max = {rows.shape[1]} perturbed states "
            f"(worst row norm {worst[-1]:.8f})"
        )
    n_prime = int(ok[0]) + 1
    phases = basis.scattering_phases[:n_prime] if basis.scattering_phases is not None else None
    return replace(
        basis,
        unperturbed_energies=basis.unperturbed_energies[:n_keep],
        perturbed_energies=basis.perturbed_energies[:n_prime],
        scattering_phases=phases,
        overlap=basis.overlap[:n_keep, :n_prime],
        epsilon=float(epsilon),
        n_kept=n_keep,
        n_perturbed=n_prime,
    )


def prepare(
    geometry: Geometry,
    coupling: CouplingSpec | float,
    temperatures: float | Iterable[float],
    epsilon: float = DEFAULT_EPSILON,
    n_max: int | None = None,
) -> tuple[BasisSet, list[ThermalState]]:
    """Full basis pipeline shared by one or more temperatures.

    The truncation is the union of what each temperature requires, so all
    returned thermal states can be evaluated on the same ``N x N'`` block.
    ``n_max`` is grown automatically until the unitarity bound is met.
    """
    if not isinstance(coupling, CouplingSpec):
        coupling = CouplingSpec(coupling)
    temps = [float(temperatures)] if np.ndim(temperatures) == 0 else [float(t) for t in temperatures]
    aux_thermals = [solve_chemical_potential(geometry, t) for t in temps]
    n_occ = max(occupied_count(th, epsilon) for th in aux_thermals)
    if n_max is None:
        s2 = math.sin(coupling.fermi_phase(geometry)) ** 2
        n_max = n_occ + int(math.ceil(1.5 * s2 / (np.pi**2 * epsilon))) + 64
    n_max = max(n_max, n_occ, geometry.shell_count)
    for _ in range(8):
        try:
            if geometry.kind is GeometryKind.HARMONIC1D_EVEN:
                full = build_harmonic_sector(geometry, coupling, n_max)
            else:
                full = build_overlap_matrix(solve_scattering_sector(geometry, coupling, n_max), epsilon)
            thermals = [
                ThermalState(
                    th.temperature,
                    th.chemical_potential,
                    th.occupations[:n_max],
                    th.shell_count,
                )
                for th in aux_thermals
            ]
            basis = truncate(full, thermals, epsilon)
            break
        except (TruncationOverflow, UnitarityViolation):
            n_max *= 2
    else:
        raise TruncationOverflow(f"no admissible truncation up to n_max = {n_max}")
    thermals = [
        ThermalState(th.temperature, th.chemical_potential, th.occupations[: basis.n_kept], th.shell_count)
        for th in thermals
    ]
    return basis, thermals


def thermal_states_for(basis: BasisSet, temperatures: Iterable[float]) -> list[ThermalState]:
    """Thermal states of ``basis.geometry`` cut to the basis' retained levels."""
    out = []
    for t in temperatures:
        th = solve_chemical_potential(basis.geometry, float(t))
        out.append(ThermalState(th.temperature, th.chemical_potential, th.occupations[: basis.n_kept], th.shell_count))
    return out


# ---------------------------------------------------------------------------
# serialisation

_FORMAT = "fermi_thermometry.basis"


def save_basis(basis: BasisSet, path: str | Path) -> Path:
    """Write a basis to a JSON text file that reloads bit-exactly."""
    path = Path(path)
    u = basis.overlap
    doc = {
        "format": _FORMAT,
        "version": 1,
        "geometry": basis.geometry.to_dict() if basis.geometry else None,
        "coupling": {"kFa": basis.coupling.kFa} if basis.coupling else None,
        "epsilon": basis.epsilon,
        "n_kept": basis.n_kept,
        "n_perturbed": basis.n_perturbed,
        "unperturbed_energies": basis.unperturbed_energies.tolist(),
        "perturbed_energies": basis.perturbed_energies.tolist(),
        "scattering_phases": None if basis.scattering_phases is None else basis.scattering_phases.tolist(),
        "overlap": None
        if u is None
        else {
            "shape": list(u.shape),
            "order": "row-major",
            "real": np.ascontiguousarray(u.real).ravel().tolist(),
            "imag": np.ascontiguousarray(u.imag).ravel().tolist() if np.iscomplexobj(u) else None,
        },
    }
    path.write_text(json.dumps(doc))
    return path


def load_basis(path: str | Path) -> BasisSet:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a saved basis")
    u = None
    if doc["overlap"] is not None:
        shape = tuple(doc["overlap"]["shape"])
        u = np.array(doc["overlap"]["real"], dtype=float).reshape(shape)
        if doc["overlap"]["imag"] is not None:
            u = u + 1j * np.array(doc["overlap"]["imag"], dtype=float).reshape(shape)
    return BasisSet(
        unperturbed_energies=np.array(doc["unperturbed_energies"], dtype=float),
        perturbed_energies=np.array(doc["perturbed_energies"], dtype=float),
        scattering_phases=None if doc["scattering_phases"] is None else np.array(doc["scattering_phases"]),
        overlap=u,
        geometry=Geometry.from_dict(doc["geometry"]) if doc["geometry"] else None,
        coupling=CouplingSpec(doc["coupling"]["kFa"]) if doc["coupling"] else None,
        epsilon=doc["epsilon"],
        n_kept=doc["n_kept"],
        n_perturbed=doc["n_perturbed"],
    )
