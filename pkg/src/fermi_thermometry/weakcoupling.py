"""Closed-form weak-coupling channel for the 3D s-wave gas.

Second-order cumulant expansion of ``v(t)``: a first-order collisional
shift ``w`` carries the temperature into the phase, and an Ohmic bath of
particle-hole pairs gives the dephasing function ``Gamma(t)``. None of this
uses the determinant engine, so it serves as an independent cross-check.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .errors import PolylogDivergence, ValidityViolation
from .levitov import DecoherenceTrace

POLYLOG_TOL = 1e-10
SERIES_RADIUS = 0.9
SHIFT_ROUTE_TOL = 1e-6
FD_STEP = 1e-2


# ---------------------------------------------------------------------------
# polylogarithm of negative argument


def polylog_neg(s: float, z: float) -> float:
    """``Li_s(-z)`` for ``z >= 0`` and ``s > 0``.

    Alternating power series for ``z <= 0.9``; otherwise the Fermi-Dirac
    integral ``-Li_s(-z) = Gamma(s)^-1 int_0^inf u^(s-1) / (e^u / z + 1) du``
    with ``u = x^2`` to remove the endpoint singularity.
    """
    if z < 0:
        raise ValueError("polylog_neg expects z >= 0 (it returns Li_s(-z))")
    if z == 0:
        return 0.0
    if z <= SERIES_RADIUS:
        return _polylog_series(s, -z)
    return -_fd_integral(s, math.log(z))


def _polylog_series(s: float, x: float) -> float:
    total = 0.0
    power = 1.0
    for k in range(1, 2000):
        power *= x
        term = power / k**s
        total += term
        if abs(term) < 1e-17 * max(abs(total), 1e-300):
            return total
    raise PolylogDivergence(f"series for Li_{s}({x}) did not converge")


def _fd_integral(s: float, eta: float) -> float:
    """``Gamma(s)^-1 int_0^inf u^(s-1) / (exp(u - eta) + 1) du`` (equals ``-Li_s(-e^eta)``)."""

    def integrand(x):
        return 2.0 * x ** (2 * s - 1) * special.expit(eta - x * x)

    x0 = math.sqrt(max(eta, 0.0))
    total = 0.0
    err = 0.0
    pieces = [(0.0, x0), (x0, x0 + 1.0), (x0 + 1.0, np.inf)] if x0 > 0 else [(0.0, 1.0), (1.0, np.inf)]
    for lo, hi in pieces:
        if hi <= lo:
            continue
        val, e = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-13, limit=400)
        total += val
        err += e
    if not np.isfinite(total) or err > POLYLOG_TOL * max(abs(total), 1e-300):
        raise PolylogDivergence(f"Fermi-Dirac integral of order {s} at eta = {eta} unresolved (err {err:.1e})")
    return total / special.gamma(s)


# ---------------------------------------------------------------------------
# thermodynamics of the s-wave continuum


def continuum_chemical_potential(temperature: float) -> float:
    """``mu(T)`` keeping the s-wave density fixed in the continuum limit.

    With the s-wave density of states ``~ E^(-1/2)`` the constraint is
    ``-Li_{1/2}(-e^{mu/T}) = 2 / sqrt(pi T)``, so ``mu ~ 1 + pi^2 T^2 / 12``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    target = 2.0 / math.sqrt(math.pi * temperature)

    def excess(mu):
        return -polylog_neg(0.5, math.exp(mu / temperature)) - target if mu / temperature < 700 else math.inf

    return optimize.brentq(excess, -10.0, 10.0, xtol=1e-14, rtol=1e-14)


def _shift_quadrature(temperature: float, mu: float, kFa: float) -> float:
    """Route (i): ``w = (a / pi) int_0^inf sqrt(E) f(E) dE``."""

    def integrand(e):
        return math.sqrt(e) * special.expit((mu - e) / temperature)

    edge = max(mu, 0.0)
    parts = [(0.0, edge), (edge, edge + 40 * temperature), (edge + 40 * temperature, np.inf)]
    total = 0.0
    for lo, hi in parts:
        if hi > lo:
            total += integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-12, limit=400)[0]
    return kFa / math.pi * total


def _shift_polylog(temperature: float, mu: float, kFa: float) -> float:
    """Route (ii): ``w = -a Li_{3/2}(-e^{mu/T}) T^{3/2} / (2 sqrt(pi))``."""
    eta = mu / temperature
    li = -_fd_integral(1.5, eta) if eta > math.log(SERIES_RADIUS) else polylog_neg(1.5, math.exp(eta))
    return -kFa * li * temperature**1.5 / (2.0 * math.sqrt(math.pi))


def first_order_shift_routes(temperature: float, mu: float, kFa: float) -> tuple[float, float]:
    """Both evaluations of the first-order shift, ``(quadrature, polylog)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return _shift_quadrature(temperature, mu, kFa), _shift_polylog(temperature, mu, kFa)


def first_order_shift(temperature: float, mu: float | None, kFa: float) -> float:
    """First-order collisional shift ``w`` (mean work per unit hbar).

    ``mu=None`` uses the continuum s-wave chemical potential. Raises
    :class:`PolylogDivergence` if the two evaluation routes disagree by more
    than ``1e-6`` relative.
    """
    if mu is None:
        mu = continuum_chemical_potential(temperature)
    quad_w, poly_w = first_order_shift_routes(temperature, mu, kFa)
    if abs(quad_w - poly_w) > SHIFT_ROUTE_TOL * max(abs(poly_w), 1e-300):
        raise PolylogDivergence(f"shift routes disagree: quadrature {quad_w!r} vs polylog {poly_w!r}")
    return poly_w


def shift_temperature_derivative(temperature: float, kFa: float, step: float = FD_STEP) -> float:
    """``dw/dT`` by central difference at ``T (1 +- step)``, re-solving ``mu`` at each side."""
    hi = temperature * (1 + step)
    lo = temperature * (1 - step)
    return (first_order_shift(hi, None, kFa) - first_order_shift(lo, None, kFa)) / (hi - lo)


def fumi_shift(kFa: float) -> float:
    """Zero-temperature shift ``w_0 = -(1/pi) int_0^1 delta(E) dE`` with ``delta = -arctan(sqrt(E) a)``."""
    if kFa >= 0:
        raise ValueError("kFa must be negative")
    val = integrate.quad(lambda e: -math.atan(math.sqrt(e) * kFa), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0]
    return -val / math.pi


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class WeakCouplingModel:
    """Parameters of the weak-coupling channel.

    ``exponent="weak"`` uses ``alpha = (kFa/pi)^2``; ``"phase_shift"`` uses the
    strong-coupling generalisation ``(delta_F/pi)^2`` with
    ``delta_F = -arctan(kFa)``.
    """

    kFa: float
    temperature: float
    mu: float | None = None
    cutoff_Lambda: float = 1.0
    exponent: str = "weak"
    shift_w: float = field(init=False)

    def __post_init__(self):
        if self.kFa >= 0:
            raise ValueError("kFa must be negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.exponent not in ("weak", "phase_shift"):
            raise ValueError(f"unknown exponent {self.exponent!r}")
        if self.temperature >= self.cutoff_Lambda:
            raise ValidityViolation("beta * Lambda must exceed 1 for the Ohmic approximation")
        if self.cutoff_Lambda / self.temperature < 5:
            warnings.warn("beta * Lambda < 5: Ohmic cutoff approximation is marginal", stacklevel=2)
        if self.mu is None:
            object.__setattr__(self, "mu", continuum_chemical_potential(self.temperature))
        object.__setattr__(self, "shift_w", first_order_shift(self.temperature, self.mu, self.kFa))

    @property
    def alpha(self) -> float:
        if self.exponent == "weak":
            return (self.kFa / math.pi) ** 2
        return self.phase_shift_alpha

    @property
    def weak_alpha(self) -> float:
        return (self.kFa / math.pi) ** 2

    @property
    def phase_shift_alpha(self) -> float:
        return (math.atan(self.kFa) / math.pi) ** 2

    @property
    def beta(self) -> float:
        return 1.0 / self.temperature

    @property
    def accuracy_class(self) -> str:
        return "quantitative" if abs(self.kFa) <= 0.5 else "qualitative"

    def with_temperature(self, temperature: float) -> "WeakCouplingModel":
        return WeakCouplingModel(self.kFa, temperature, None, self.cutoff_Lambda, self.exponent)


def spectral_density(omega, model: WeakCouplingModel, mode: str = "exact_integral"):
    """Particle-hole spectral density ``J(omega)``.

    ``exact_integral``: ``alpha int_0^inf sqrt(E (E + omega)) f(E) [1 - f(E + omega)] dE``.
    ``ohmic_approx``: ``(alpha/2) omega [1 + coth(omega / 2T)]``.
    """
    omega = np.asarray(omega, dtype=float)
    if np.any(np.abs(omega) >= 10):
        raise ValueError("|omega| must be below 10 E_F")
    alpha = model.alpha
    T = model.temperature
    if mode == "ohmic_approx":
        return alpha * _ohmic_shape(omega, T)
    if mode != "exact_integral":
        raise ValueError(f"unknown mode {mode!r}")
    out = np.array([alpha * _pair_integral(float(om), model.mu, T) for om in omega.ravel()])
    return out.reshape(omega.shape) if omega.ndim else float(out[0])


def _ohmic_shape(omega, T):
    """``omega (1 + coth(omega/2T)) / 2`` with the removable point ``omega = 0`` set to ``T``."""
    omega = np.asarray(omega, dtype=float)
    x = omega / (2 * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = omega / (1.0 - np.exp(-2.0 * x))
    return np.where(np.abs(x) < 1e-8, T + omega / 2, val)


def _pair_integral(omega: float, mu: float, T: float) -> float:
    lo = max(0.0, -omega)

    def integrand(e):
        return math.sqrt(e * (e + omega)) * special.expit((mu - e) / T) * special.expit((e + omega - mu) / T)

    centre = mu - omega / 2
    pts = sorted({p for p in (lo, mu - omega, mu, centre) if p > lo})
    edges = [lo] + pts + [max(mu, mu - omega) + 60 * T]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            total += integrate.quad(integrand, a, b, epsabs=1e-15, epsrel=1e-11, limit=200)[0]
    return total


def _log_sinh(y):
    """``ln sinh(y)`` for ``y > 0`` without overflow."""
    y = np.asarray(y, dtype=float)
    return y + np.log1p(-np.exp(-2.0 * y)) - math.log(2.0)


def dephasing_gamma(t, model: WeakCouplingModel):
    """``Gamma(t) = alpha {ln[(Lambda beta / pi) sinh(pi t / beta)] - Ci(Lambda t) + gamma_E}``."""
    t = np.asarray(t, dtype=float)
    lam = model.cutoff_Lambda
    beta = model.beta
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos]
    ci = special.sici(lam * tp)[1]
    out[pos] = model.alpha * (
        math.log(lam * beta / math.pi) + _log_sinh(math.pi * tp / beta) - ci + np.euler_gamma
    )
    return out if t.ndim else float(out)


def phase_Phi(t, model: WeakCouplingModel):
    """Second-order phase ``Phi(t) = alpha (Lambda t - Si(Lambda t))``.

    Tends to ``alpha (Lambda t - pi/2)`` for ``Lambda t >> 1``.
    """
    t = np.asarray(t, dtype=float)
    lam = model.cutoff_Lambda
    return model.alpha * (lam * t - special.sici(lam * t)[0])


def log_thermal_bracket(t, temperature: float):
    """``ln[(beta/pi) sinh(pi t / beta)]`` clamped at zero from below."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = _log_sinh(math.pi * temperature * t[pos]) - math.log(math.pi * temperature)
    return np.maximum(out, 0.0)


def approx_decoherence(t_grid, model: WeakCouplingModel, include_phi: bool = False) -> DecoherenceTrace:
    """``v(t) = e^{iwt} [(beta/pi) sinh(pi t / beta)]^(-alpha)``.

    The bracket is clamped to at least one so that ``|v| <= 1`` near
    ``t = 0``. ``include_phi`` subtracts the second-order phase ``Phi(t)``.
    """
    t = np.asarray(t_grid, dtype=float)
    log_mag = -model.alpha * log_thermal_bracket(t, model.temperature)
    phase = model.shift_w * t
    if include_phi:
        phase = phase - phase_Phi(t, model)
    values = np.exp(log_mag + 1j * phase)
    if t.size and t[0] == 0:
        values[0] = 1.0
    regime = {
        "channel": "weak",
        "temperature": model.temperature,
        "chemical_potential": model.mu,
        "kFa": model.kFa,
        "geometry": "box3d_continuum",
        "alpha": model.alpha,
        "exponent": model.exponent,
        "cutoff_Lambda": model.cutoff_Lambda,
        "include_phi": include_phi,
        "accuracy_class": model.accuracy_class,
    }
    return DecoherenceTrace(t, values, phase, log_mag, regime)


def crossover_time(temperature: float) -> float:
    """Time separating the power-law and exponential regimes of the bracket.

    The asymptotes ``t`` and ``(beta / 2 pi) exp(pi t / beta)`` never cross;
    their logarithmic distance ``y - ln 2 - ln y`` (``y = pi t / beta``) is
    smallest at ``y = 1``, where their log-slopes also match. Hence
    ``t_c = beta / pi``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return 1.0 / (math.pi * temperature)


# ---------------------------------------------------------------------------
# analytic optimum


@dataclass(frozen=True)
class WeakOptimum:
    t_max: float
    Q_max: float
    x: float
    residual: float
    form: str
    dw_dT: float


def _solve_x_coth(target: float) -> float:
    if target <= 1:
        raise ValidityViolation(f"x coth x = {target:.3g} has no positive root")

    def f(x):
        return x / math.tanh(x) - target

    x = optimize.brentq(f, 1e-12, target + 1.0, xtol=1e-15, rtol=1e-15, maxiter=500)
    return x


def weak_qsnr(t, model: WeakCouplingModel, dw_dT: float | None = None):
    """Phase-only QSNR ``t |v(t)| T |dw/dT|`` (purity term neglected)."""
    if dw_dT is None:
        dw_dT = shift_temperature_derivative(model.temperature, model.kFa)
    t = np.asarray(t, dtype=float)
    mag = np.exp(-model.alpha * log_thermal_bracket(t, model.temperature))
    return t * mag * model.temperature * abs(dw_dT)


def weak_coupling_optimum(
    temperature: float, kFa: float, form: str = "corrected", exponent: str = "weak"
) -> WeakOptimum:
    """Optimal time and QSNR of the phase-only weak-coupling QSNR.

    ``form="corrected"`` solves ``x coth x = 1/alpha`` with ``x = pi T t``,
    the stationarity condition of ``t |v(t)|``. ``form="printed"`` solves
    ``x coth x = 1 / (pi alpha T)`` instead, kept to audit the printed
    result. ``Q_max`` is the phase-only QSNR at the chosen ``t_max``.
    """
    model = WeakCouplingModel(kFa, temperature, exponent=exponent)
    alpha = model.alpha
    if math.pi * alpha * temperature >= 1:
        raise ValidityViolation("pi alpha T must be well below T_F")
    if form == "corrected":
        target = 1.0 / alpha
    elif form == "printed":
        target = 1.0 / (math.pi * alpha * temperature)
    else:
        raise ValueError(f"unknown form {form!r}")
    x = _solve_x_coth(target)
    residual = abs(x / math.tanh(x) - target) / target
    t_max = x / (math.pi * temperature)
    dw = shift_temperature_derivative(temperature, kFa)
    q = float(weak_qsnr(t_max, model, dw))
    return WeakOptimum(t_max, q, x, residual, form, dw)
