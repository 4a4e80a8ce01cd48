import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import GeometryError, NonStationaryPointError
from src.core.geometry import (
    Ball,
    DeterminantVariant,
    ShapeOperator2,
    SpheroidFrame,
    TangentFrame,
    UnitPairGeometry,
    bistatic_deviation,
    broken_path_length,
    det_shape_diff,
    hessian_phi_chart,
    hessian_phi_closed_form,
    closed_form_det,
    monostatic_polynomial,
    random_reflection_configuration,
    resolve_determinant_variant,
    shifted_difference_det,
    shifted_frame,
    snell_normal,
    snell_residual,
    spheroid_inward_normal,
    spheroid_point,
    spheroid_radial,
    spheroid_shape_operator,
)
from src.data.obstacle import Ellipsoid, Sphere
from src.data.reflector import min_broken_path

S1_P = np.array([4.0, 0.0, 0.0])
S1_P_PRIME = np.array([0.0, 4.0, 0.0])
S1_C = 6.735898


def test_ball_shift_stays_inside():
    ball = Ball((0.0, 4.0, 0.0), 0.5)
    sub = ball.shifted(0.2, (1.0, 1.0, 0.0))
    assert np.isclose(sub.radius, 0.3)
    assert ball.contains_ball(sub)
    with pytest.raises(GeometryError):
        ball.shifted(0.5, (1.0, 0.0, 0.0))


def test_lattice_weights_sum_to_volume():
    ball = Ball((0.3, -0.2, 0.1), 0.5)
    nodes, weights = ball.lattice_quadrature(0.05)
    assert np.isclose(weights.sum(), ball.volume, rtol=1e-12)
    assert np.all(np.linalg.norm(nodes - ball.center, axis=1) <= ball.radius + 0.05)


def test_s1_spheroid_radial_hits_reflector(s1_q):
    frame = SpheroidFrame(S1_P, S1_P_PRIME, float(broken_path_length(s1_q, S1_P, S1_P_PRIME)))
    assert np.isclose(frame.c, S1_C, atol=1e-6)
    omega = (s1_q - S1_P_PRIME) / np.linalg.norm(s1_q - S1_P_PRIME)
    assert np.allclose(spheroid_point(omega, frame), s1_q, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(1.05, 4.0)
)
def test_spheroid_points_lie_on_spheroid(x, y, z, ratio):
    omega = np.array([x, y, z])
    if np.linalg.norm(omega) < 1e-3:
        return
    omega = omega / np.linalg.norm(omega)
    p, p_prime = np.array([1.0, 0.5, -0.2]), np.array([-0.4, 0.1, 0.3])
    frame = SpheroidFrame(p, p_prime, ratio * np.linalg.norm(p - p_prime))
    s = spheroid_radial(omega, frame)
    assert frame.min_radial - 1e-12 <= s
    assert np.isclose(frame.phi(spheroid_point(omega, frame)), frame.c, rtol=1e-12)


def test_spheroid_needs_c_beyond_focal_distance():
    with pytest.raises(GeometryError):
        SpheroidFrame(S1_P, S1_P_PRIME, 4.0)


def test_s1_unit_vectors(s1_q):
    geo = UnitPairGeometry.at(s1_q, S1_P, S1_P_PRIME)
    assert np.allclose(geo.A, [-0.97771, 0.20995, 0.0], atol=1e-5)
    assert np.allclose(geo.A_prime, [0.20995, -0.97771, 0.0], atol=1e-5)
    assert np.isclose(geo.r + geo.r_prime, S1_C, atol=1e-6)


def test_s1_inward_normal_points_to_the_foci(s1_q):
    frame = SpheroidFrame(S1_P, S1_P_PRIME, float(broken_path_length(s1_q, S1_P, S1_P_PRIME)))
    nu = spheroid_inward_normal(s1_q, frame)
    assert np.allclose(nu, s1_q, atol=1e-12)


def test_s1_snell_normal(s1_q):
    geo = UnitPairGeometry.at(s1_q, S1_P, S1_P_PRIME)
    nu = snell_normal(geo)
    assert np.allclose(nu, s1_q, atol=1e-12)
    assert snell_residual(geo, nu) < 1e-12


def test_snell_normal_rejects_point_on_focal_segment():
    geo = UnitPairGeometry.at(np.array([2.0, 2.0, 0.0]), S1_P, S1_P_PRIME)
    with pytest.raises(GeometryError):
        snell_normal(geo)



def test_spheroid_normal_rejects_a_collapsed_spheroid():
    c = 2.0 + 2e-10
    frame = SpheroidFrame(np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), c)
    with pytest.raises(GeometryError):
        spheroid_inward_normal(np.array([0.0, np.sqrt((c / 2.0) ** 2 - 1.0), 0.0]), frame)

def test_spheroid_curvature_identities(s1_q):
    frame = SpheroidFrame(S1_P, S1_P_PRIME, float(broken_path_length(s1_q, S1_P, S1_P_PRIME)))
    curv = spheroid_shape_operator(s1_q, frame)
    geo = UnitPairGeometry.at(s1_q, S1_P, S1_P_PRIME)
    assert np.allclose(curv.operator.m, np.diag([curv.k1, curv.k2]), atol=1e-12)
    assert np.isclose(curv.operator.gauss, geo.lam**2 / 4.0, rtol=1e-12)
    assert np.isclose(curv.operator.mean, curv.mean, rtol=1e-12)
    assert np.isclose(curv.k1, 0.54692, atol=1e-5)
    assert np.isclose(curv.k2, 0.16119, atol=1e-5)
    # the shortcut lam (3 + A.A') / 8 is the mean only when A = A'
    assert not np.isclose(curv.mean, geo.lam * (3.0 + geo.dot) / 8.0, rtol=1e-2)
    assert np.isclose(curv.mean, geo.lam * (3.0 + geo.dot) / (4.0 * np.sqrt(2.0 * geo.gap)), rtol=1e-12)


def test_tangent_frame_from_normal_is_orthonormal():
    tf = TangentFrame.from_normal(np.zeros(3), (0.3, -0.4, 0.87), hint=(1.0, 0.0, 0.0))
    G = np.stack([tf.e1, tf.e2, tf.nu])
    assert np.allclose(G @ G.T, np.eye(3), atol=1e-12)
    assert tf.e1 @ np.array([1.0, 0.0, 0.0]) > 0


def test_shape_operator_principal_order():
    tf = TangentFrame.from_normal(np.zeros(3), (0.0, 0.0, 1.0))
    op = ShapeOperator2(np.array([[-0.25, 0.0], [0.0, -1.0]]), tf)
    k, _ = op.principal()
    assert np.allclose(k, [-0.25, -1.0])
    assert np.isclose(op.gauss, 0.25)
    assert np.isclose(op.mean, -0.625)


def test_shape_operator_rejects_asymmetric_matrix():
    with pytest.raises(GeometryError):
        ShapeOperator2(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_s1_determinant(s1_q):
    frame = SpheroidFrame(S1_P, S1_P_PRIME, float(broken_path_length(s1_q, S1_P, S1_P_PRIME)))
    assert np.isclose(det_shape_diff(s1_q, Sphere(), frame), 1.79629, atol=1e-4)


def test_shifted_frame_passes_through_q(s1_q):
    frame = shifted_frame(s1_q, S1_P, S1_P_PRIME, 0.3)
    assert np.isclose(frame.phi(s1_q), frame.c, rtol=1e-12)
    assert np.isclose(frame.c, S1_C - 0.3, atol=1e-6)


def test_det_shape_diff_rejects_large_shift(s1_q):
    frame = SpheroidFrame(S1_P, S1_P_PRIME, float(broken_path_length(s1_q, S1_P, S1_P_PRIME)))
    with pytest.raises(GeometryError):
        det_shape_diff(s1_q, Sphere(), frame, s=0.6, eta_prime=0.5)


def test_hessian_chart_matches_closed_form_on_ellipsoid():
    obstacle = Ellipsoid.from_euler((0.0, 0.0, 0.0), (2.0, 1.0, 1.0), (10.0, 20.0, 30.0))
    c, reflectors = min_broken_path(obstacle, S1_P, S1_P_PRIME)
    q = reflectors.single().q
    spheroid = spheroid_shape_operator(q, SpheroidFrame(S1_P, S1_P_PRIME, c)).operator
    closed = hessian_phi_closed_form(
        UnitPairGeometry.at(q, S1_P, S1_P_PRIME), spheroid, obstacle.shape_operator_at(q).operator
    )
    chart = hessian_phi_chart(q, spheroid.frame, S1_P, S1_P_PRIME, obstacle.height_function(spheroid.frame))
    np.testing.assert_allclose(chart, closed, atol=1e-5 * np.abs(closed).max())


def test_hessian_chart_refuses_non_stationary_point():
    obstacle = Sphere()
    q = np.array([1.0, 0.0, 0.0])
    tf = TangentFrame.from_normal(q, q)
    with pytest.raises(NonStationaryPointError):
        hessian_phi_chart(q, tf, S1_P, S1_P_PRIME, obstacle.height_function(tf))


def test_variant_resolution_is_unique_and_stable():
    first = resolve_determinant_variant(100, 0)
    second = resolve_determinant_variant(100, 1)
    assert first.variant is second.variant is DeterminantVariant.QUARTER
    assert first.max_errors["quarter"] < 1e-9
    assert first.max_errors["half"] > 1e-6


def test_closed_form_determinant_matches_direct():
    rng = np.random.default_rng(7)
    for _ in range(20):
        q, p, p_prime, S_D, s = random_reflection_configuration(rng)
        direct = shifted_difference_det(q, p, p_prime, S_D, s)
        closed = closed_form_det(UnitPairGeometry.at(q, p, p_prime), S_D, s, DeterminantVariant.QUARTER)
        assert np.isclose(closed, direct, rtol=1e-9, atol=1e-9)


def test_monostatic_deviation_vanishes():
    q = np.array([1.0, 0.0, 0.0])
    p = np.array([4.0, 0.0, 0.0])
    geo = UnitPairGeometry.at(q, p, p + np.array([0.0, 1e-12, 0.0]))
    tf = TangentFrame.from_normal(q, q)
    S_D = ShapeOperator2(-np.eye(2), tf)
    assert np.isclose(monostatic_polynomial(1.0 / 3.0, S_D), (1.0 / 3.0 + 1.0) ** 2)
    assert abs(bistatic_deviation(geo, S_D, DeterminantVariant.QUARTER)) < 1e-9
