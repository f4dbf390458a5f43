"""Monte Carlo Ramsey thermometry and maximum-likelihood estimation.

A pi/2 pulse, free evolution for ``t``, a second pi/2 pulse of phase
``theta`` and a projective readout give outcome ``+1`` with probability
``(1 + cos(theta) Re v + sin(theta) Im v) / 2``. Temperatures are inferred
by maximising the binomial likelihood of the recorded counts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import interpolate, optimize

from .errors import BoundaryMaximum, DegenerateOutcome
from .metrology import fisher_of_equatorial_measurement

CLAMP_TOL = 1e-12
SCAN_POINTS = 201
ZERO_INFO_RTOL = 1e-12


def outcome_probability(v, theta):
    """Probability of the ``+1`` outcome for coherence ``v`` and pulse phase ``theta``."""
    v = np.asarray(v, dtype=complex)
    p = 0.5 * (1.0 + np.cos(theta) * v.real + np.sin(theta) * v.imag)
    if np.any(p < -CLAMP_TOL) or np.any(p > 1 + CLAMP_TOL):
        raise ValueError("outcome probability outside [0, 1]; |v| must not exceed 1")
    p = np.clip(p, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True)
class RamseyConfig:
    theta: float
    shots: int
    readout_time: float
    truth_temperature: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be at least 1")
        if self.readout_time < 0:
            raise ValueError("readout_time must be non-negative")
        if self.truth_temperature <= 0:
            raise ValueError("truth_temperature must be positive")


@dataclass(frozen=True, eq=False)
class RamseyRecord:
    outcomes: np.ndarray
    config: RamseyConfig

    @property
    def n_plus(self) -> int:
        return int(np.count_nonzero(self.outcomes > 0))

    @property
    def n_minus(self) -> int:
        return int(self.outcomes.size - self.n_plus)

    @property
    def empirical_mean(self) -> float:
        return float(self.outcomes.mean())


def simulate(config: RamseyConfig, trace_provider: Callable[[float, float], complex]) -> RamseyRecord:
    """Draw ``config.shots`` independent readouts.

    ``trace_provider(t, T)`` returns the coherence at the readout time.
    """
    v = trace_provider(config.readout_time, config.truth_temperature)
    p = outcome_probability(v, config.theta)
    rng = np.random.default_rng(config.rng_seed)
    outcomes = np.where(rng.random(config.shots) < p, 1, -1).astype(np.int8)
    return RamseyRecord(outcomes, config)


# ---------------------------------------------------------------------------
# coherence as a function of temperature at one readout time


@dataclass(frozen=True, eq=False)
class PointModel:
    """Cubic-spline ``v(T)`` at a fixed readout time.

    Real and imaginary parts are interpolated separately, so no phase
    unwrapping in ``T`` is needed.
    """

    readout_time: float
    temperatures: np.ndarray
    values: np.ndarray
    _re: interpolate.CubicSpline = field(init=False, repr=False)
    _im: interpolate.CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_re", interpolate.CubicSpline(self.temperatures, self.values.real))
        object.__setattr__(self, "_im", interpolate.CubicSpline(self.temperatures, self.values.imag))

    @property
    def bracket(self) -> tuple[float, float]:
        return float(self.temperatures[0]), float(self.temperatures[-1])

    def __call__(self, temperature):
        return self._re(temperature) + 1j * self._im(temperature)

    def provider(self, t: float, temperature: float) -> complex:
        if not math.isclose(t, self.readout_time):
            raise ValueError("PointModel only describes its own readout time")
        return complex(self(temperature))


def build_point_model(channel, readout_time: float, t_lo: float, t_hi: float, n: int = 41) -> PointModel:
    """Sample ``channel.values_at`` on ``n`` temperatures in ``[t_lo, t_hi]``."""
    temps = np.linspace(t_lo, t_hi, n)
    values = np.asarray(channel.values_at(temps, readout_time), dtype=complex)
    return PointModel(readout_time, temps, values)


# ---------------------------------------------------------------------------
# estimation


@dataclass(frozen=True, eq=False)
class EstimationResult:
    T_est: float
    log_likelihood_curve: np.ndarray
    stderr_estimate: float
    n_shots: int


def log_likelihood(temperature, n_plus: float, n_minus: float, model: Callable, theta: float):
    p = np.clip(outcome_probability(model(temperature), theta), 1e-300, 1 - 1e-16)
    with np.errstate(divide="ignore", invalid="ignore"):
        plus = np.where(n_plus > 0, n_plus * np.log(p), 0.0)
        minus = np.where(n_minus > 0, n_minus * np.log1p(-p), 0.0)
    return plus + minus


def mle_from_counts(
    n_plus: float,
    n_minus: float,
    model: Callable,
    theta: float,
    T_bracket: tuple[float, float],
    scan_points: int = SCAN_POINTS,
) -> EstimationResult:
    """Maximum-likelihood ``T`` from outcome counts.

    A grid scan locates the global maximum; golden-section search refines it
    inside the neighbouring grid cells. Raises :class:`BoundaryMaximum` if
    the scan peaks at a bracket edge.
    """
    lo, hi = T_bracket
    grid = np.linspace(lo, hi, scan_points)
    ell = log_likelihood(grid, n_plus, n_minus, model, theta)
    i = int(np.argmax(ell))
    if i == 0 or i == grid.size - 1:
        raise BoundaryMaximum(f"likelihood maximal at bracket edge T = {grid[i]:g}")

    def neg(T):
        return -float(log_likelihood(T, n_plus, n_minus, model, theta))

    res = optimize.minimize_scalar(neg, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden", tol=1e-10)
    t_hat = float(res.x)
    if not lo < t_hat < hi:
        raise BoundaryMaximum(f"likelihood maximal at bracket edge T = {t_hat:g}")
    h = 1e-4 * t_hat
    curvature = (neg(t_hat + h) - 2 * neg(t_hat) + neg(t_hat - h)) / h**2
    stderr = 1.0 / math.sqrt(curvature) if curvature > 0 else math.inf
    curve = np.column_stack([grid, ell])
    return EstimationResult(t_hat, curve, stderr, int(round(n_plus + n_minus)))


def mle_temperature(record: RamseyRecord, model: Callable, T_bracket: tuple[float, float]) -> EstimationResult:
    """Estimate ``T`` from a simulated record using ``model(T) -> v``."""
    return mle_from_counts(record.n_plus, record.n_minus, model, record.config.theta, T_bracket)


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchmarkRow:
    theta: float
    N: int
    var_Test: float
    inv_NFT: float
    inv_NFQ: float
    n_replicas: int
    seed: int
    mean_Test: float
    n_failed: int

    @property
    def flagged(self) -> bool:
        return self.n_failed > 0 or not math.isfinite(self.var_Test)


def replica_estimates(
    model: PointModel, theta: float, shots: int, truth: float, n_replicas: int, seed: int
) -> tuple[np.ndarray, int]:
    """MLE over replicas with seeds ``seed + r``; returns (estimates, number of boundary failures)."""
    estimates = []
    failed = 0
    for r in range(n_replicas):
        cfg = RamseyConfig(theta, shots, model.readout_time, truth, seed + r)
        rec = simulate(cfg, model.provider)
        try:
            estimates.append(mle_temperature(rec, model, model.bracket).T_est)
        except BoundaryMaximum:
            failed += 1
    return np.array(estimates), failed


def estimator_benchmark(
    thetas: Sequence[float],
    shots: int,
    truth: float,
    model: PointModel,
    v0: complex,
    dv_dT: complex,
    F_Q: float,
    n_replicas: int = 200,
    seed: int = 0,
) -> list[BenchmarkRow]:
    """Empirical ``Var(T_est)`` against ``1/(N F_T(theta))`` and ``1/(N F_Q)``.

    Pulse phases with no information (``F_T = 0``) or deterministic outcomes
    are reported with infinite bounds and flagged rather than raised.
    """
    rows = []
    for theta in thetas:
        try:
            f_t = float(fisher_of_equatorial_measurement(v0, dv_dT, theta))
        except DegenerateOutcome:
            f_t = math.inf
        # cos(pi/2) round-off leaves F_T ~ 1e-32 rather than zero
        inv_nft = 1.0 / (shots * f_t) if f_t > ZERO_INFO_RTOL * F_Q else math.inf
        est, failed = replica_estimates(model, theta, shots, truth, n_replicas, seed)
        if failed or est.size < 2:
            var = math.inf
            mean = float(est.mean()) if est.size else math.nan
        else:
            var = float(est.var(ddof=1))
            mean = float(est.mean())
        rows.append(BenchmarkRow(float(theta), shots, var, inv_nft, 1.0 / (shots * F_Q), n_replicas, seed, mean, failed))
    return rows


def write_benchmark_csv(rows: Sequence[BenchmarkRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "N", "var_Test", "inv_NFT", "inv_NFQ", "n_replicas", "seed"])
        for r in rows:
            w.writerow([f"{r.theta:.12g}", r.N, f"{r.var_Test:.12g}", f"{r.inv_NFT:.12g}", f"{r.inv_NFQ:.12g}", r.n_replicas, r.seed])
    return path
