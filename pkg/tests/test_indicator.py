import numpy as np
import pytest

from src.core.errors import IndicatorFitError, QuadratureError
from src.core.geometry import Ball
from src.data.obstacle import Sphere
from src.models.indicator import (
    IndicatorCurve,
    decay_fit,
    default_tau_grid,
    fdtd_curve,
    indicator_value,
    joint_limit,
    longest_plateau,
    noise_floor,
    scaled_limit,
    semianalytic_curve,
    usable_window,
)
from src.models.potentials import ball_ball_integral
from src.models.wavesim import LaplaceField

KAPPA = 5.73590


def manufactured(taus, log_values, source="test"):
    taus = np.asarray(taus, dtype=np.float64)
    return IndicatorCurve(taus, log_values, np.ones_like(taus), source)


def test_decay_fit_recovers_rate_and_prefactor():
    taus = default_tau_grid(4.0, 40.0, 24)
    curve = manufactured(taus, 3.0 * np.log(taus) - 2.5 * taus + np.log(0.7))
    fit = decay_fit(curve)
    assert np.isclose(fit.rate, 2.5, atol=1e-9)
    assert np.isclose(fit.prefactor_power, 3.0, atol=1e-7)
    assert fit.residual < 1e-9
    known = decay_fit(curve, known_power=3.0)
    assert np.isclose(known.rate, 2.5, atol=1e-10)
    assert known.uncertainty < 1e-9
    assert known.window == (4.0, 40.0)


def test_decay_fit_needs_enough_samples():
    taus = np.linspace(4.0, 10.0, 7)
    with pytest.raises(IndicatorFitError):
        decay_fit(manufactured(taus, -taus))


def test_decay_fit_refuses_negative_or_flat_indicator():
    taus = np.linspace(4.0, 20.0, 10)
    signs = np.ones(10)
    signs[3] = -1.0
    with pytest.raises(IndicatorFitError):
        decay_fit(IndicatorCurve(taus, -taus, signs, "test"))
    log_values = -taus
    log_values[-1] = log_values[-2] + 0.1
    with pytest.raises(IndicatorFitError):
        decay_fit(manufactured(taus, log_values))


def test_curve_requires_increasing_taus():
    with pytest.raises(IndicatorFitError):
        manufactured([1.0, 3.0, 2.0], [0.0, 0.0, 0.0])


def test_scaled_limit_with_half_power_correction():
    taus = np.geomspace(20.0, 400.0, 24)
    C = 0.0258
    curve = manufactured(taus, np.log(C) - 4.0 * np.log(taus) - KAPPA * taus + np.log1p(taus**-0.5))
    result = scaled_limit(curve, KAPPA, exponents=(0.5,))
    assert np.isclose(result.limit, C, rtol=1e-9)
    assert not result.diverging


@pytest.mark.parametrize("factor", [0.99, 1.01])
def test_scaled_limit_flags_wrong_kappa(factor):
    taus = np.geomspace(20.0, 400.0, 24)
    curve = manufactured(taus, np.log(0.0258) - 4.0 * np.log(taus) - KAPPA * taus)
    assert scaled_limit(curve, factor * KAPPA).diverging


def test_joint_limit_recovers_constant_and_rate():
    taus = np.geomspace(40.0, 400.0, 16)
    curve = manufactured(taus, np.log(0.0258) - 4.0 * np.log(taus) - KAPPA * taus + 0.3 / taus)
    joint = joint_limit(curve)
    assert np.isclose(np.exp(joint.log_limit), 0.0258, rtol=1e-8)
    assert np.isclose(joint.kappa, KAPPA, rtol=1e-10)
    with pytest.raises(IndicatorFitError):
        joint_limit(curve.window(40.0, 60.0))


def test_longest_plateau_prefers_late_runs():
    values = np.array([1.0, 2.0, 2.01, 3.0, 3.01, 4.5])
    assert longest_plateau(values) == (3, 5)


def test_tau_positive():
    taus = np.arange(1.0, 5.0)
    assert IndicatorCurve(taus, np.zeros(4), [-1, -1, 1, 1], "t").tau_positive == 3.0
    assert IndicatorCurve(taus, np.zeros(4), [1, 1, 1, 1], "t").tau_positive == 1.0
    assert IndicatorCurve(taus, np.zeros(4), [1, 1, 1, -1], "t").tau_positive is None


def test_usable_window_stops_at_the_noise():
    taus = np.arange(1.0, 11.0)
    log_values = -taus.copy()
    log_values[7:] = -6.5
    window = usable_window(manufactured(taus, log_values))
    assert window.taus.tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]


def test_noise_floor():
    taus = np.arange(1.0, 7.0)
    signal = manufactured(taus, -taus)
    noise = manufactured(taus, np.full(6, -6.0))
    assert noise_floor(signal, noise, snr=10.0) == 3.0
    with pytest.raises(IndicatorFitError):
        noise_floor(signal, manufactured(taus + 1.0, -taus))


def test_csv_keeps_full_precision(tmp_path):
    taus = default_tau_grid(4.0, 40.0, 9)
    curve = IndicatorCurve(taus, -KAPPA * taus / 3.0, np.where(taus < 10, -1.0, 1.0), "fdtd")
    curve.to_csv(tmp_path / "indicator.csv")
    loaded = IndicatorCurve.from_csv(tmp_path / "indicator.csv")
    assert np.array_equal(loaded.taus, curve.taus)
    assert np.array_equal(loaded.log_values, curve.log_values)
    assert np.array_equal(loaded.signs, curve.signs)
    assert loaded.source == "fdtd"


def test_csv_with_mixed_sources_is_refused(tmp_path):
    path = tmp_path / "mixed.csv"
    path.write_text("tau,log_indicator,sign,source\n1.0,-1.0,1,fdtd\n2.0,-2.0,1,semianalytic_2J\n")
    with pytest.raises(IndicatorFitError):
        IndicatorCurve.from_csv(path)


def _field(taus, values, n_nodes=4):
    return LaplaceField(
        np.asarray(taus, dtype=np.float64),
        np.zeros((n_nodes, 3)),
        np.full(n_nodes, 0.25),
        np.asarray(values, dtype=np.float64),
        0.05,
    )


def test_fdtd_curve_subtracts_the_reference_run(s1):
    _, ball, ball_prime = s1
    taus = [2.0, 3.0]
    field = _field(taus, [[1.0] * 4, [0.5] * 4])
    reference = _field(taus, [[3.0] * 4, [0.25] * 4])
    curve = fdtd_curve(field, ball, ball_prime, reference=reference)
    np.testing.assert_allclose(curve.values, [2.0, -0.25])
    assert curve.geometry["subtraction"] == "reference_run"
    with pytest.raises(QuadratureError):
        fdtd_curve(field, ball, ball_prime, reference=_field([2.0, 4.0], [[0.0] * 4] * 2))


def test_indicator_value_uses_closed_form_direct_term(s1):
    _, ball, ball_prime = s1
    field = _field([2.0], [[1e-8] * 4])
    assert np.isclose(indicator_value(2.0, field, ball, ball_prime), ball_ball_integral(ball, ball_prime, 2.0) - 1e-8, rtol=1e-12, atol=0.0)
    with pytest.raises(QuadratureError):
        indicator_value(2.5, field, ball, ball_prime)


def test_semianalytic_curve_of_s1_decays(s1):
    obstacle, ball, ball_prime = s1
    curve = semianalytic_curve(obstacle, ball, ball_prime, np.geomspace(8.0, 40.0, 10))
    assert curve.source == "semianalytic_2J"
    assert np.all(curve.signs > 0)
    assert np.all(np.diff(curve.log_values) < 0)
    # I(tau) ~ C tau^-4 e^{-tau kappa} for a pair of balls
    assert abs(decay_fit(curve, known_power=-4.0).rate / KAPPA - 1.0) < 0.02


def test_decay_rate_scales_with_the_scene(s1):
    obstacle, ball, ball_prime = s1
    taus = np.linspace(4.0, 12.0, 9)
    rate = decay_fit(semianalytic_curve(obstacle, ball, ball_prime, taus)).rate
    big, big_prime = Ball(2.0 * ball.center, 2.0 * ball.radius), Ball(2.0 * ball_prime.center, 2.0 * ball_prime.radius)
    scaled = semianalytic_curve(Sphere(radius=2.0), big, big_prime, taus / 2.0)
    assert np.isclose(decay_fit(scaled).rate, 2.0 * rate, rtol=1e-3)
