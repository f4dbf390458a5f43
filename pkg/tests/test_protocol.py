import math

import numpy as np
import pytest

from fermi_thermometry.errors import BoundaryMaximum
from fermi_thermometry.protocol import (
    PointModel,
    RamseyConfig,
    estimator_benchmark,
    mle_from_counts,
    mle_temperature,
    outcome_probability,
    simulate,
    write_benchmark_csv,
)


def toy_values(temps, t=20.0):
    # |v| and phase both depend on T, so every pulse phase carries some information
    temps = np.asarray(temps, dtype=float)
    return np.exp(-0.3 * temps * t) * np.exp(1j * (0.5 + 2.0 * temps) * t)


def toy_model(t=20.0):
    temps = np.linspace(0.05, 0.15, 201)
    return PointModel(t, temps, toy_values(temps, t))


def test_outcome_probability_examples():
    assert outcome_probability(1.0, 0.0) == pytest.approx(1.0)
    assert outcome_probability(0.0, 1.234) == pytest.approx(0.5)
    v = 0.6 + 0.3j
    expected = 0.5 * (1 + (0.6 + 0.3) / math.sqrt(2))
    assert outcome_probability(v, math.pi / 4) == pytest.approx(expected)
    assert expected == pytest.approx(0.8182, abs=1e-4)
    with pytest.raises(ValueError):
        outcome_probability(1.5, 0.0)


def test_certain_outcome_gives_all_plus():
    rec = simulate(RamseyConfig(0.0, 1000, 1.0, 0.1, 3), lambda t, T: 1.0)
    assert rec.n_plus == 1000 and rec.n_minus == 0


def test_binomial_statistics():
    # p = 0.7 means <outcome> = 0.4 with standard error 2 sqrt(p(1-p)/N)
    n = 100_000
    rec = simulate(RamseyConfig(0.0, n, 1.0, 0.1, 7), lambda t, T: 0.4)
    sigma = 2 * math.sqrt(0.7 * 0.3 / n)
    assert abs(rec.empirical_mean - 0.4) < 3 * sigma


def test_same_seed_same_record():
    cfg = RamseyConfig(0.3, 500, 1.0, 0.1, 42)
    a = simulate(cfg, lambda t, T: 0.2 + 0.1j)
    b = simulate(cfg, lambda t, T: 0.2 + 0.1j)
    assert np.array_equal(a.outcomes, b.outcomes)
    c = simulate(RamseyConfig(0.3, 500, 1.0, 0.1, 43), lambda t, T: 0.2 + 0.1j)
    assert not np.array_equal(a.outcomes, c.outcomes)


def test_config_validation():
    with pytest.raises(ValueError):
        RamseyConfig(0.0, 0, 1.0, 0.1)
    with pytest.raises(ValueError):
        RamseyConfig(0.0, 10, -1.0, 0.1)
    with pytest.raises(ValueError):
        RamseyConfig(0.0, 10, 1.0, 0.0)


def test_point_model_interpolates_and_guards_time():
    model = toy_model()
    assert model(0.1) == pytest.approx(toy_values(0.1), abs=1e-8)
    with pytest.raises(ValueError):
        model.provider(21.0, 0.1)


def test_noise_free_mle_recovers_truth():
    model = toy_model()
    truth, theta, n = 0.1, 0.7, 10_000
    p = outcome_probability(model(truth), theta)
    res = mle_from_counts(n * p, n * (1 - p), model, theta, model.bracket)
    assert res.T_est == pytest.approx(truth, rel=1e-6)
    assert 0 < res.stderr_estimate < math.inf


def test_mle_on_simulated_record_is_close():
    model = toy_model()
    rec = simulate(RamseyConfig(0.7, 20_000, 20.0, 0.1, 1), model.provider)
    res = mle_temperature(rec, model, model.bracket)
    assert abs(res.T_est - 0.1) < 5 * res.stderr_estimate


def test_boundary_maximum():
    model = toy_model()
    p = outcome_probability(model(0.1), 0.7)
    with pytest.raises(BoundaryMaximum):
        mle_from_counts(1000 * p, 1000 * (1 - p), model, 0.7, (0.1005, 0.15))


def test_benchmark_flags_uninformative_phase(tmp_path):
    # a real v with only |v| depending on T carries no information at theta = pi/2
    temps = np.linspace(0.05, 0.15, 101)
    model = PointModel(10.0, temps, np.exp(-2.0 * temps).astype(complex))
    v0 = complex(model(0.1))
    dv = -2.0 * v0
    f_q = abs(dv) ** 2 / (1 - abs(v0) ** 2)
    rows = estimator_benchmark([0.0, math.pi / 2], 2000, 0.1, model, v0, dv, f_q, n_replicas=20)
    good, bad = rows
    assert not good.flagged
    assert good.inv_NFT == pytest.approx(good.inv_NFQ)
    assert bad.inv_NFT == math.inf and bad.flagged
    lines = write_benchmark_csv(rows, tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "theta,N,var_Test,inv_NFT,inv_NFQ,n_replicas,seed"
    assert len(lines) == 3
