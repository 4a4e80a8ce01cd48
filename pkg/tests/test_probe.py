import numpy as np
import pytest

from src.core.errors import ConfigurationError, GeometryError, IndicatorFitError
from src.core.geometry import Ball
from src.core.verify import ellipsoid_rotation_setup
from src.data.obstacle import Sphere
from src.models.indicator import usable_window
from src.models.probe import (
    FDTDSource,
    GeometrySource,
    SemiAnalyticSource,
    curvature_extract,
    extract_normal,
    omega_grid,
    principal_directions,
    reconstruct_ball,
    rotate_about_normal,
    scan_reflector,
)
from src.models.wavesim import LaplaceField

S1_C = 6.735898
S1_KAPPA = 5.73590


def test_geometry_source_first_reflection(s1):
    source = GeometrySource(*s1)
    first = source.first_reflection_distance()
    assert np.isclose(first.c, S1_C, atol=1e-6)
    assert np.isclose(first.kappa, S1_KAPPA, atol=1e-5)
    assert first.uncertainty == 0.0


def test_extract_normal_from_the_reflection_law(s1, s1_q):
    _, ball, ball_prime = s1
    assert np.allclose(extract_normal(s1_q, ball.center, ball_prime.center), s1_q, atol=1e-12)


def test_rotation_about_the_normal_fixes_the_axis(s1_q):
    x = s1_q + np.array([0.0, 0.0, 1.0])
    rotated = rotate_about_normal(x, s1_q, s1_q, np.pi / 2)
    assert np.isclose(np.linalg.norm(rotated - s1_q), 1.0)
    assert np.isclose((rotated - s1_q) @ s1_q, 0.0, atol=1e-12)
    assert np.allclose(rotate_about_normal(s1_q + 2.0 * s1_q, s1_q, s1_q, 1.3), 3.0 * s1_q)


def test_curvature_of_the_unit_sphere(s1, s1_q):
    report = curvature_extract(GeometrySource(*s1), s1_q, 0.1, 0.2)
    assert np.isclose(report.gauss, 1.0, atol=1e-6)
    assert np.isclose(report.h_combination, -0.64737, atol=1e-4)
    # A x A' != 0, so H itself is not identified
    assert report.mean is None
    assert report.bistatic_deviation is not None
    assert report.to_dict()["mode"] == "geometry"


@pytest.mark.parametrize("shifts", [(0.2, 0.1), (0.0, 0.2), (0.1, 0.6)])
def test_curvature_shifts_must_be_ordered_inside_the_receiver(s1, s1_q, shifts):
    with pytest.raises(ConfigurationError):
        curvature_extract(GeometrySource(*s1), s1_q, *shifts)


def test_reconstruct_unit_ball(s1):
    result = reconstruct_ball(GeometrySource(*s1), shifts=(0.1, 0.2), omega_level=3, progress=False)
    assert np.allclose(result.center, 0.0, atol=1e-5)
    assert np.isclose(result.radius, 1.0, atol=1e-5)
    assert len(result.scan.clusters) == 1


def test_scan_shift_outside_receiver_is_refused(s1):
    with pytest.raises(GeometryError):
        scan_reflector(GeometrySource(*s1), 0.5, progress=False)


def test_principal_frame_of_the_ellipsoid():
    obstacle, q, ball, ball_prime = ellipsoid_rotation_setup()
    result = principal_directions(GeometrySource(obstacle, ball, ball_prime), q, progress=False)
    truth = obstacle.shape_operator_at(q).operator
    assert not result.isotropic
    assert abs(result.mean / truth.mean - 1.0) < 0.02
    for found, expected in zip(result.directions, truth.principal_directions()):
        angle = np.degrees(np.arccos(min(1.0, abs(found @ expected))))
        assert angle < 2.0


def test_sphere_is_umbilic(s1, s1_q):
    result = principal_directions(GeometrySource(*s1), s1_q, progress=False)
    assert result.isotropic
    assert np.isclose(result.curvatures[0], result.curvatures[1])


def test_monostatic_pair_has_no_rotation_leverage():
    p = np.array([3.0, 0.0, 0.0])
    source = GeometrySource(Sphere(), Ball(p, 0.3), Ball(p + np.array([0.0, 1e-13, 0.0]), 0.3))
    with pytest.raises(GeometryError):
        principal_directions(source, np.array([1.0, 0.0, 0.0]), progress=False)


def test_fdtd_source_needs_time_past_first_reflection(s1):
    with pytest.raises(ConfigurationError):
        FDTDSource(*s1, T=5.0, progress=False).run()


def test_fdtd_source_needs_an_obstacle(s1):
    _, ball, ball_prime = s1
    with pytest.raises(ConfigurationError):
        FDTDSource(None, ball, ball_prime, progress=False).run()


@pytest.mark.slow
def test_semianalytic_first_reflection(s1):
    first = SemiAnalyticSource(*s1, taus=np.geomspace(4.0, 40.0, 12)).first_reflection_distance()
    assert abs(first.kappa / S1_KAPPA - 1.0) < 1e-3


class UpperHalfBlind(GeometrySource):
    """Shifted receivers above the xy-plane yield no usable decay."""

    def shifted_minimum(self, sub_ball: Ball):
        if sub_ball.center[2] > 1e-9:
            raise IndicatorFitError("indicator below the noise floor")
        return super().shifted_minimum(sub_ball)


class Blind(GeometrySource):
    def shifted_minimum(self, sub_ball: Ball):
        raise IndicatorFitError("indicator below the noise floor")


def test_scan_reports_directions_without_decay(s1):
    omegas, _ = omega_grid(2)
    result = scan_reflector(UpperHalfBlind(*s1), 0.25, omega_level=2, refine=False, progress=False)
    expected = int((omegas[:, 2] > 1e-9).sum())
    assert 0 < expected < len(omegas)
    assert int(result.failed.sum()) == expected
    assert not np.any(result.hits & result.failed)
    assert result.to_dict()["n_failed"] == expected


def test_scan_without_any_decay_is_an_error(s1):
    with pytest.raises(IndicatorFitError):
        scan_reflector(Blind(*s1), 0.25, omega_level=1, refine=False, progress=False)


def test_fdtd_fit_window_stops_at_round_off(s1):
    _, ball, ball_prime = s1
    taus = np.arange(1.0, 21.0)
    direct, reflected = np.exp(-taus), np.exp(-3.0 * taus)
    nodes, weights = ball_prime.center[None, :], np.ones(1)
    free = LaplaceField(taus, nodes, weights, direct[:, None], 0.05)
    scattered = LaplaceField(taus, nodes, weights, (direct - reflected)[:, None], 0.05)
    source = FDTDSource(None, ball, ball_prime, taus=taus, progress=False)
    source._fields = (scattered, free)
    assert usable_window(source.curve()).taus[-1] > 14.0
    assert source.fit_window().taus[-1] == 14.0


class Bumped(Sphere):
    """Unit sphere whose samples carry one point outside the tangent plane at (1, 1, 0) / sqrt 2."""

    def surface_samples(self, level=None):
        points, normals = super().surface_samples(level)
        bump = np.array([[1.5, 1.5, 0.0]])
        return np.vstack([points, bump]), np.vstack([normals, bump / np.linalg.norm(bump)])


def test_curvature_flags_an_obstacle_outside_the_tangent_half_space(s1, s1_q, caplog):
    _, ball, ball_prime = s1
    assert curvature_extract(GeometrySource(*s1), s1_q, 0.1, 0.2).supported
    report = curvature_extract(GeometrySource(Bumped(), ball, ball_prime), s1_q, 0.1, 0.2)
    assert report.supported is False
    assert report.to_dict()["supported"] is False
    assert "tangent half-space" in caplog.text
