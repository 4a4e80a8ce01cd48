import numpy as np
import pytest
import trimesh
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core.errors import GeometryError
from src.core.geometry import Ball
from src.data.obstacle import (
    Ellipsoid,
    MeshObstacle,
    Sphere,
    graded_radial_rule,
    load_mesh,
    spherical_triangle_areas,
    unit_icosphere,
    write_mesh,
)


def test_graded_radial_rule_is_exact_for_low_powers():
    rho, w = graded_radial_rule(8, 0.01)
    assert np.isclose(w.sum(), 1.0, rtol=1e-13)
    assert np.isclose(np.sum(w * rho**2), 1.0 / 3.0, rtol=1e-13)
    assert np.all((rho > 0) & (rho < 1))


def test_spherical_triangles_tile_the_sphere():
    vertices, faces = unit_icosphere(3)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    assert np.isclose(spherical_triangle_areas(a, b, c).sum(), 4.0 * np.pi, rtol=1e-12)


def test_ellipsoid_volume_quadrature():
    obstacle = Ellipsoid.from_euler((0.1, -0.2, 0.3), (2.0, 1.0, 0.5), (15.0, 30.0, 45.0))
    _, weights = obstacle.volume_quadrature(level=3)
    assert np.isclose(weights.sum(), 4.0 / 3.0 * np.pi * 2.0 * 1.0 * 0.5, rtol=1e-10)


def test_sphere_shape_operator():
    curv = Sphere(radius=2.0).shape_operator_at(np.array([0.0, 0.0, 2.0]))
    assert np.allclose(curv.operator.m, -0.5 * np.eye(2), atol=1e-12)
    assert np.isclose(curv.gauss, 0.25)
    assert np.isclose(curv.mean, -0.5)


def test_ellipsoid_shape_operator_on_the_short_axis():
    obstacle = Ellipsoid((0.0, 0.0, 0.0), (2.0, 1.0, 1.0))
    curv = obstacle.shape_operator_at(np.array([0.0, 1.0, 0.0]))
    k, _ = curv.operator.principal()
    assert np.allclose(sorted(k), [-1.0, -0.25], atol=1e-12)
    assert np.isclose(curv.gauss, 0.25)
    assert np.isclose(curv.mean, -0.625)


@settings(max_examples=40, deadline=None)
@given(st.floats(-4.0, 4.0), st.floats(-4.0, 4.0), st.floats(-4.0, 4.0))
def test_ellipsoid_projection_is_orthogonal(x, y, z):
    point = np.array([x, y, z])
    obstacle = Ellipsoid.from_euler((0.0, 0.0, 0.0), (2.0, 1.0, 0.7), (0.0, 20.0, 40.0))
    if np.linalg.norm(point) < 1e-2:
        return
    projected = obstacle.project(point)
    assert np.isclose(obstacle.implicit(projected), 1.0, atol=1e-9)
    d = point - projected
    if np.linalg.norm(d) > 1e-6 and not obstacle.contains(point):
        normal = obstacle.normal_at(projected)
        assert np.linalg.norm(np.cross(d / np.linalg.norm(d), normal)) < 1e-6


def test_on_surface_refuses_points_off_the_surface():
    with pytest.raises(GeometryError):
        Sphere().on_surface(np.array([1.1, 0.0, 0.0]))


def test_segment_intersects_sphere():
    sphere = Sphere()
    assert sphere.segment_intersects(np.array([-2.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0]))
    assert not sphere.segment_intersects(np.array([4.0, 0.0, 0.0]), np.array([0.0, 4.0, 0.0]))
    assert not sphere.segment_intersects(np.array([2.0, 0.0, 0.0]), np.array([3.0, 0.0, 0.0]))


def test_rejects_degenerate_axes():
    with pytest.raises(GeometryError):
        Ellipsoid((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


def test_hull_clearance_of_s1(s1):
    obstacle, ball, ball_prime = s1
    assert obstacle.hull_clearance(ball, ball_prime) > 1.0
    assert Sphere(radius=3.0).hull_clearance(ball, ball_prime) < 0.0
    assert Sphere().hull_clearance(Ball((0.0, 0.0, 0.0), 0.5), ball_prime) < 0.0


def test_mesh_curvature_on_icosphere():
    obstacle = MeshObstacle.from_trimesh(trimesh.creation.icosphere(subdivisions=4, radius=1.0))
    q = np.asarray(obstacle.mesh.vertices[0], dtype=np.float64)
    curv = obstacle.shape_operator_at(q)
    assert np.isclose(curv.gauss, 1.0, rtol=0.05)
    assert np.isclose(curv.mean, -1.0, rtol=0.05)
    assert np.allclose(obstacle.normal_at(q), q, atol=1e-3)


def test_mesh_volume_quadrature_matches_mesh_volume():
    mesh = trimesh.creation.icosphere(subdivisions=2, radius=1.0)
    obstacle = MeshObstacle.from_trimesh(mesh)
    _, weights = obstacle.volume_quadrature(level=0)
    assert np.isclose(weights.sum(), mesh.volume, rtol=1e-9)


def test_mesh_must_be_watertight():
    mesh = trimesh.creation.icosphere(subdivisions=1)
    open_mesh = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces[1:], process=False)
    with pytest.raises(GeometryError):
        MeshObstacle(open_mesh)


def test_mesh_file_round_trip(tmp_path):
    mesh = trimesh.creation.icosphere(subdivisions=2, radius=1.0)
    path = tmp_path / "sphere.obj"
    write_mesh(path, mesh)
    obstacle = load_mesh(path)
    assert len(obstacle.mesh.vertices) == len(mesh.vertices)
    assert np.isclose(obstacle.mesh.volume, mesh.volume, rtol=1e-12)
    with pytest.raises(GeometryError):
        load_mesh(tmp_path / "missing.obj")
