import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import (
    AsymptoticRegimeError,
    ConfigurationError,
    DegenerateDeterminantError,
    GeometryError,
)
from src.core.geometry import Ball
from src.data.obstacle import Sphere
from src.models.potentials import (
    AsymptoticKind,
    ReflectorTerm,
    asymptotic_rhs,
    ball_ball_integral,
    c_d_constants,
    fixed_ratio_marking,
    integrate_surface,
    j_boundary,
    j_kernel_expansion,
    j_volume,
    leading_coefficient,
    log_yukawa_moment,
    split_triangles,
    yukawa_ball,
    yukawa_ball_quadrature,
)


def test_yukawa_exterior_value():
    value, _ = yukawa_ball(np.array([3.0, 0.0, 0.0]), Ball(np.zeros(3), 0.5), 2.0)
    assert np.isclose(value, 3.7995e-5, rtol=1e-4)


@pytest.mark.parametrize("r", [0.0, 0.2, 0.5, 0.9, 2.5])
def test_yukawa_matches_direct_quadrature(r):
    ball = Ball((0.1, -0.3, 0.2), 0.6)
    x = ball.center + r * np.array([0.0, 0.6, 0.8])
    value, _ = yukawa_ball(x, ball, 3.0)
    assert np.isclose(value, yukawa_ball_quadrature(x, ball, 3.0), rtol=1e-8)


@pytest.mark.parametrize("r", [0.3, 1.5])
def test_yukawa_gradient_by_differences(r):
    ball = Ball(np.zeros(3), 0.5)
    x = r * np.array([0.48, 0.6, 0.64])
    _, grad = yukawa_ball(x, ball, 2.5)
    h = 1e-6
    fd = np.array(
        [
            (yukawa_ball(x + h * e, ball, 2.5)[0] - yukawa_ball(x - h * e, ball, 2.5)[0]) / (2.0 * h)
            for e in np.eye(3)
        ]
    )
    np.testing.assert_allclose(grad, fd, rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.02, 30.0))
def test_log_moment_matches_direct_formula(z):
    assert np.isclose(log_yukawa_moment(z), np.log(z * np.cosh(z) - np.sinh(z)), rtol=0, atol=1e-9)


def test_log_moment_does_not_overflow():
    z = np.array([1e-4, 800.0])
    values = log_yukawa_moment(z)
    assert np.all(np.isfinite(values))
    assert np.isclose(values[0], 3.0 * np.log(1e-4) - np.log(3.0))
    assert np.isclose(values[1], 800.0 + np.log(399.5))


def test_ball_ball_closed_form(s1):
    _, ball, ball_prime = s1
    tau = 2.0
    d = np.linalg.norm(ball.center - ball_prime.center)
    moment = 1.0 * np.cosh(1.0) - np.sinh(1.0)
    expected = 4.0 * np.pi * moment**2 * np.exp(-tau * d) / (tau**6 * d)
    assert np.isclose(ball_ball_integral(ball, ball_prime, tau), expected, rtol=1e-12)
    assert np.isclose(expected, 5.73e-8, rtol=2e-3)


def test_ball_ball_refuses_overlap():
    with pytest.raises(GeometryError):
        ball_ball_integral(Ball(np.zeros(3), 0.5), Ball((0.8, 0.0, 0.0), 0.5), 1.0)
    with pytest.raises(ConfigurationError):
        ball_ball_integral(Ball(np.zeros(3), 0.5), Ball((4.0, 0.0, 0.0), 0.5), 0.0)


def test_split_triangles_preserves_area():
    tri = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
    children = split_triangles(tri)
    area = 0.5 * np.linalg.norm(np.cross(children[:, 1] - children[:, 0], children[:, 2] - children[:, 0]), axis=1)
    assert len(children) == 4
    assert np.allclose(area, 0.25)


def test_fixed_ratio_marking():
    errors = np.array([0.5, 0.05, 0.4, 0.05])
    assert fixed_ratio_marking(errors).tolist() == [True, False, True, False]
    assert not fixed_ratio_marking(np.zeros(3)).any()


def test_surface_area_of_sphere():
    result = integrate_surface(Sphere(radius=2.0), lambda x, nu: np.ones(len(x)))
    assert np.isclose(result.values[0], 16.0 * np.pi, rtol=1e-5)


def test_divergence_theorem_on_sphere():
    # int x . nu dS = 3 |D|
    result = integrate_surface(Sphere(radius=1.5), lambda x, nu: np.einsum("ij,ij->i", x, nu))
    assert np.isclose(result.values[0], 3.0 * 4.0 / 3.0 * np.pi * 1.5**3, rtol=1e-5)


def test_boundary_and_volume_forms_agree(s1):
    obstacle, ball, ball_prime = s1
    boundary = j_boundary(obstacle, ball, ball_prime, 2.0)
    volume = j_volume(obstacle, ball, ball_prime, 2.0)
    assert boundary.sign == volume.sign == 1.0
    assert abs(np.expm1(volume.log_value - boundary.log_value)) < 5e-3


def test_j_refuses_hull_contact(s1):
    _, ball, _ = s1
    with pytest.raises(ConfigurationError):
        j_boundary(Sphere(radius=3.0), ball, Ball((0.0, 4.0, 0.0), 0.5), 2.0)


def test_kernel_expansion_needs_large_tau(s1):
    obstacle, ball, ball_prime = s1
    with pytest.raises(AsymptoticRegimeError):
        j_kernel_expansion(obstacle, ball, ball_prime, 1.5)


def test_leading_coefficient_of_s1(s1):
    obstacle, ball, ball_prime = s1
    assert np.isclose(leading_coefficient(obstacle, ball, ball_prime), 0.025831, atol=1e-5)


def test_monostatic_constant():
    value = asymptotic_rhs(AsymptoticKind.MONOSTATIC, [ReflectorTerm(3.0, 3.0, (4.0 / 3.0) ** 2)], 0.5, 0.5)
    assert np.isclose(value, 0.5 * np.pi * (0.5 / 3.0) ** 2 / (4.0 / 3.0))


def test_shifted_constant_reduces_to_ball_pair_without_shift():
    term = ReflectorTerm(3.2, 3.5, 1.7)
    ball_pair = asymptotic_rhs(AsymptoticKind.BALL_PAIR, [term], 0.5, 0.4)
    shifted = asymptotic_rhs(AsymptoticKind.SHIFTED, [term], 0.5, 0.4, s=0.0)
    assert np.isclose(ball_pair, shifted)


def test_asymptotic_constant_refuses_bad_determinants():
    with pytest.raises(DegenerateDeterminantError):
        asymptotic_rhs(AsymptoticKind.POINT_PAIR, [ReflectorTerm(3.0, 3.0, 0.0)])
    with pytest.raises(GeometryError):
        asymptotic_rhs(AsymptoticKind.POINT_PAIR, [])


def test_cd_constants_of_s1(s1):
    obstacle, ball, ball_prime = s1
    constants = c_d_constants(obstacle, ball.center, ball_prime.center, ball, ball_prime)
    assert constants.valid
    assert 0.0 < constants.balls <= constants.points < 2.0
