import logging
from abc import ABC, abstractmethod
from collections import namedtuple
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import trimesh
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from src.core.errors import GeometryError
from src.core.geometry import (
    Ball,
    ShapeOperator2,
    TangentFrame,
    as_point,
    convex_hull_distance,
    unit,
)

logger = logging.getLogger(__name__)

SurfaceCurvature = namedtuple("SurfaceCurvature", ["operator", "gauss", "mean", "frame"])


@lru_cache(maxsize=16)
def unit_icosphere(level: int) -> Tuple[np.ndarray, np.ndarray]:
    sphere = trimesh.creation.icosphere(subdivisions=level, radius=1.0)
    return np.asarray(sphere.vertices, dtype=np.float64), np.asarray(sphere.faces)


def spherical_triangle_areas(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solid angles of spherical triangles with unit vertices (rows)."""
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = (
        1.0
        + np.einsum("ij,ij->i", a, b)
        + np.einsum("ij,ij->i", b, c)
        + np.einsum("ij,ij->i", c, a)
    )
    return 2.0 * np.arctan2(triple, denom)


def graded_radial_rule(n_nodes: int, skin: float) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [0, 1] with layers doubling away from 1.

    The outermost layer has width `skin` (relative), which resolves integrands
    decaying like exp(-tau * depth) when skin ~ 1 / tau.
    """
    skin = float(np.clip(skin, 1e-6, 1.0))
    edges = [1.0]
    width = skin
    while edges[-1] - width > 0.0:
        edges.append(edges[-1] - width)
        width *= 2.0
    edges.append(0.0)
    edges = np.array(edges[::-1])
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(lo + half * (x + 1.0))
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


class ObstacleShape(ABC):
    """Closed sound-soft scatterer with outward normals."""

    kind: str = "abstract"
    default_sample_level: int = 7

    @property
    @abstractmethod
    def center(self) -> np.ndarray: ...

    @property
    @abstractmethod
    def bounding_radius(self) -> float: ...

    @property
    def diameter(self) -> float:
        return 2.0 * self.bounding_radius

    @abstractmethod
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def contains(self, x: np.ndarray) -> np.ndarray:
        """Closed-set membership for a stack of points."""

    @abstractmethod
    def normal_at(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def project(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def surface_triangles(self, level: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(param vertices, faces, face ids) of a triangulation of the surface."""

    @abstractmethod
    def lift(
        self, params: np.ndarray, face_ids: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Map parameter points to (surface points, outward normals)."""

    @abstractmethod
    def area_density(self, params: np.ndarray, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        """Surface area per parameter area at params, for parameter triangles
        with edge vectors t1, t2 (rows)."""

    @abstractmethod
    def shape_operator_at(self, q: np.ndarray, hint: Optional[np.ndarray] = None) -> SurfaceCurvature: ...

    @abstractmethod
    def segment_intersects(self, a: np.ndarray, b: np.ndarray) -> bool: ...

    @abstractmethod
    def volume_quadrature(
        self, level: int, radial_nodes: int = 8, skin: float = 0.05
    ) -> Tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def to_dict(self) -> dict: ...

    def surface_samples(self, level: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        level = self.default_sample_level if level is None else level
        params, _, _ = self.surface_triangles(level)
        return self.lift(params)

    def sample_spacing(self, level: Optional[int] = None) -> float:
        """Longest edge of the lifted sample triangulation."""
        level = self.default_sample_level if level is None else level
        params, faces, _ = self.surface_triangles(level)
        points, _ = self.lift(params)
        edges = np.concatenate(
            [points[faces[:, i]] - points[faces[:, (i + 1) % 3]] for i in range(3)]
        )
        return float(np.linalg.norm(edges, axis=1).max())

    def hull_clearance(self, ball: Ball, ball_prime: Ball, level: int = 5) -> float:
        """Distance from the sampled surface to the hull of B and B' (negative if
        they meet), corrected by the sample spacing."""
        points, _ = self.surface_samples(level)
        d = float(convex_hull_distance(points, ball, ball_prime).min())
        if np.any(self.contains(np.stack([ball.center, ball_prime.center]))):
            return -abs(d)
        return d - self.sample_spacing(level)

    def on_surface(self, q: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
        """Project q, refusing points further than tol from the surface."""
        q = as_point(q)
        tol = 1e-6 * self.diameter if tol is None else tol
        projected = self.project(q)
        if np.linalg.norm(projected - q) > tol:
            raise GeometryError(
                f"point {q} is {np.linalg.norm(projected - q):.3e} away from the "
                f"{self.kind} surface"
            )
        return projected

    def height_function(self, tf: TangentFrame) -> Callable[[np.ndarray], float]:
        raise GeometryError(f"no analytic height chart for obstacle kind {self.kind}")


class QuadricObstacle(ObstacleShape):
    """Ellipsoid {x : (x - c)^T Q (x - c) <= 1}, Q = R diag(a^-2) R^T."""

    def __init__(self, center, semi_axes, rotation: Optional[np.ndarray] = None):
        self._center = as_point(center)
        self.semi_axes = np.asarray(semi_axes, dtype=np.float64).reshape(3)
        if np.any(self.semi_axes <= 0):
            raise GeometryError(f"semi-axes must be positive, got {self.semi_axes}")
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-10:
            raise GeometryError("ellipsoid orientation is not a rotation matrix")
        self.L = self.rotation @ np.diag(self.semi_axes)
        self.L_inv = np.diag(1.0 / self.semi_axes) @ self.rotation.T
        self.Q = self.rotation @ np.diag(self.semi_axes**-2) @ self.rotation.T

    @property
    def center(self) -> np.ndarray:
        return self._center

    @property
    def bounding_radius(self) -> float:
        return float(self.semi_axes.max())

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        half = np.sqrt(np.sum(self.L**2, axis=1))
        return self._center - half, self._center + half

    def implicit(self, x: np.ndarray) -> np.ndarray:
        d = np.asarray(x) - self._center
        return np.einsum("...i,ij,...j->...", d, self.Q, d)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.implicit(x) <= 1.0

    def normal_at(self, x: np.ndarray) -> np.ndarray:
        return unit((np.asarray(x) - self._center) @ self.Q)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Nearest surface point, from the 1D Lagrange-multiplier equation."""
        y = self.rotation.T @ (as_point(x) - self._center)
        a2 = self.semi_axes**2

        def g(t: float) -> float:
            return float(np.sum((self.semi_axes * y / (a2 + t)) ** 2) - 1.0)

        if abs(g(0.0)) < 1e-15:
            return as_point(x)
        lo = -a2.min() * (1.0 - 1e-12)
        hi = 0.0
        if g(0.0) > 0:
            hi = max(1.0, float(np.linalg.norm(y) * self.semi_axes.max()))
            while g(hi) > 0:
                hi *= 2.0
            lo = 0.0
        elif g(lo) < 0:
            # y sits on the medial axis; any direction of the smallest axis works
            return self._center + self.L @ unit(y + 1e-12 * np.eye(3)[np.argmin(a2)])
        t = brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
        z = a2 * y / (a2 + t)
        return self._center + self.rotation @ z

    def surface_triangles(self, level: int):
        vertices, faces = unit_icosphere(level)
        return vertices, faces, np.arange(len(faces))

    def lift(self, params: np.ndarray, face_ids: Optional[np.ndarray] = None):
        u = unit(np.asarray(params, dtype=np.float64))
        points = self._center + u @ self.L.T
        return points, self.normal_at(points)

    def param_of(self, x: np.ndarray) -> np.ndarray:
        return unit((np.asarray(x) - self._center) @ self.L_inv.T)

    def area_density(self, params: np.ndarray, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        """dS / dA for x = c + L w / |w| with w on the flat facet spanned by t1, t2."""
        w = np.asarray(params, dtype=np.float64)
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        u = w / nw

        def push(t):
            radial = t - np.einsum("ij,ij->i", u, t)[:, None] * u
            return (radial / nw) @ self.L.T

        flat = np.linalg.norm(np.cross(t1, t2), axis=-1)
        return np.linalg.norm(np.cross(push(t1), push(t2)), axis=-1) / flat

    def height_function(self, tf: TangentFrame) -> Callable[[np.ndarray], float]:
        """f(sigma) with q + E sigma + f nu on the surface, the root through f(0)=0."""
        a = float(tf.nu @ self.Q @ tf.nu)

        def f(sigma: np.ndarray) -> float:
            b = tf.q + tf.basis @ sigma - self._center
            beta = float(b @ self.Q @ tf.nu)
            gamma = float(b @ self.Q @ b) - 1.0
            return -gamma / (beta + np.sqrt(beta**2 - a * gamma))

        return f

    def shape_operator_at(self, q: np.ndarray, hint: Optional[np.ndarray] = None) -> SurfaceCurvature:
        """Closed-form second fundamental form, S = -E^T Q E / |Q (q - c)|."""
        q = self.on_surface(q)
        g = self.Q @ (q - self._center)
        tf = TangentFrame.from_normal(q, g, hint=hint)
        E = tf.basis
        m = -(E.T @ self.Q @ E) / np.linalg.norm(g)
        operator = ShapeOperator2(0.5 * (m + m.T), tf)
        return SurfaceCurvature(operator, operator.gauss, operator.mean, tf)

    def segment_intersects(self, a: np.ndarray, b: np.ndarray) -> bool:
        ua = self.L_inv @ (as_point(a) - self._center)
        ub = self.L_inv @ (as_point(b) - self._center)
        d = ub - ua
        t = 0.0 if d @ d == 0 else float(np.clip(-(ua @ d) / (d @ d), 0.0, 1.0))
        return bool(np.linalg.norm(ua + t * d) <= 1.0)

    def volume_quadrature(self, level: int, radial_nodes: int = 8, skin: float = 0.05):
        """Star-shaped rule det(L) rho^2 drho dOmega over the unit ball."""
        vertices, faces = unit_icosphere(level)
        a, b, c = (vertices[faces[:, i]] for i in range(3))
        directions = unit(a + b + c)
        solid = spherical_triangle_areas(a, b, c)
        rho, w_rho = graded_radial_rule(radial_nodes, skin / self.semi_axes.min())
        points = self._center + (rho[:, None, None] * directions[None]) @ self.L.T
        weights = np.linalg.det(self.L) * (rho**2 * w_rho)[:, None] * solid[None]
        return points.reshape(-1, 3), weights.reshape(-1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self._center.tolist(),
            "semi_axes": self.semi_axes.tolist(),
            "rotation": self.rotation.tolist(),
        }


class Sphere(QuadricObstacle):
    kind = "sphere"

    def __init__(self, center=(0.0, 0.0, 0.0), radius: float = 1.0):
        super().__init__(center, [radius] * 3)
        self.radius = float(radius)

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.center + self.radius * unit(as_point(x) - self.center)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


class Ellipsoid(QuadricObstacle):
    kind = "ellipsoid"

    @classmethod
    def from_euler(cls, center, semi_axes, angles_deg=(0.0, 0.0, 0.0), seq: str = "xyz") -> "Ellipsoid":
        rotation = Rotation.from_euler(seq, angles_deg, degrees=True).as_matrix()
        return cls(center, semi_axes, rotation)


def enforce_trimesh(mesh) -> trimesh.Trimesh:
    if isinstance(mesh, trimesh.Scene):
        meshes = []
        for name, geometry in mesh.geometry.items():
            transform = mesh.graph.get(name)[0]
            meshes.append(
                trimesh.Trimesh(
                    vertices=trimesh.transform_points(geometry.vertices, transform),
                    faces=geometry.faces,
                )
            )
        return trimesh.util.concatenate(meshes)
    elif isinstance(mesh, trimesh.Trimesh):
        return mesh
    else:
        raise ValueError(f"Unsupported mesh type: {type(mesh)}")


class MeshObstacle(ObstacleShape):
    """Watertight triangulated obstacle; curvature by local quadric fits."""

    kind = "mesh"
    default_sample_level = 0

    def __init__(self, mesh: trimesh.Trimesh, ridge: float = 1e-10, min_neighbors: int = 6):
        if not mesh.is_watertight:
            raise GeometryError("mesh obstacle must be watertight")
        if not mesh.is_winding_consistent:
            raise GeometryError("mesh obstacle must have consistent winding")
        if mesh.volume <= 0:
            raise GeometryError(
                f"mesh signed volume {mesh.volume:.3e} <= 0: faces must wind outward"
            )
        self.mesh = mesh
        self.ridge = ridge
        self.min_neighbors = min_neighbors
        self.h_mesh = float(mesh.edges_unique_length.mean())

    @classmethod
    def from_trimesh(cls, mesh) -> "MeshObstacle":
        return cls(enforce_trimesh(mesh))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.mesh.centroid, dtype=np.float64)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.mesh.vertices - self.center, axis=1).max())

    def bounds(self):
        return self.mesh.bounds[0].astype(np.float64), self.mesh.bounds[1].astype(np.float64)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.mesh.contains(x)

    def _closest(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        points, _, triangle_ids = trimesh.proximity.closest_point(self.mesh, x)
        return points, triangle_ids

    def normal_at(self, x: np.ndarray) -> np.ndarray:
        """Barycentric blend of vertex normals at the closest surface point."""
        single = np.asarray(x).ndim == 1
        points, tri = self._closest(x)
        bary = trimesh.triangles.points_to_barycentric(self.mesh.triangles[tri], points)
        vn = self.mesh.vertex_normals[self.mesh.faces[tri]]
        normals = unit(np.einsum("ij,ijk->ik", bary, vn))
        return normals[0] if single else normals

    def project(self, x: np.ndarray) -> np.ndarray:
        points, _ = self._closest(as_point(x))
        return points[0]

    def faces_around(self, x: np.ndarray) -> np.ndarray:
        """Mesh faces sharing a vertex with the face closest to any of the points.

        Works for samples of any subdivision level, which are not mesh vertices.
        """
        _, tri = self._closest(x)
        corners = np.unique(self.mesh.faces[tri].ravel())
        faces = self.mesh.vertex_faces[corners]
        return np.unique(faces[faces >= 0])

    def surface_triangles(self, level: int):
        vertices = np.asarray(self.mesh.vertices, dtype=np.float64)
        faces = np.asarray(self.mesh.faces)
        for _ in range(level):
            vertices, faces = trimesh.remesh.subdivide(vertices, faces)
        if level == 0:
            return vertices, faces, np.arange(len(faces))
        # midpoint splits stay inside their parent face
        _, _, face_ids = trimesh.proximity.closest_point(self.mesh, vertices[faces].mean(axis=1))
        return vertices, faces, np.asarray(face_ids)

    def area_density(self, params: np.ndarray, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        return np.ones(len(params))

    def lift(self, params: np.ndarray, face_ids: Optional[np.ndarray] = None):
        points = np.asarray(params, dtype=np.float64)
        if face_ids is None:
            return points, self.normal_at(points)
        return points, np.asarray(self.mesh.face_normals[face_ids], dtype=np.float64)

    def _neighborhood(self, vertex: int) -> np.ndarray:
        neighbors = self.mesh.vertex_neighbors
        ring, seen = {vertex}, {vertex}
        rings = 0
        while len(seen) < 4 * self.min_neighbors or rings < 2:
            ring = {n for v in ring for n in neighbors[v]} - seen
            if not ring:
                break
            seen |= ring
            rings += 1
        return np.fromiter(seen, dtype=int)

    def shape_operator_at(self, q: np.ndarray, hint: Optional[np.ndarray] = None) -> SurfaceCurvature:
        """Least-squares height quadric w = a u^2 + b uv + c v^2 + d u + e v + f in
        the tangent frame at q, with ridge regularisation."""
        q = self.on_surface(q, tol=max(1e-6 * self.diameter, 1e-3 * self.h_mesh))
        _, tri = self._closest(q)
        corners = self.mesh.faces[tri[0]]
        nearest = corners[np.argmin(np.linalg.norm(self.mesh.vertices[corners] - q, axis=1))]
        idx = self._neighborhood(int(nearest))
        if len(idx) < self.min_neighbors:
            raise GeometryError(
                f"mesh quadric fit at {q} has only {len(idx)} neighbours "
                f"(need {self.min_neighbors})"
            )
        tf = TangentFrame.from_normal(q, self.normal_at(q), hint=hint)
        local = self.mesh.vertices[idx] - q
        u, v = local @ tf.e1, local @ tf.e2
        w = local @ tf.nu
        X = np.column_stack([u**2, u * v, v**2, u, v, np.ones_like(u)])
        if np.linalg.cond(X) > 1e10:
            raise GeometryError(f"mesh quadric fit at {q} is ill-conditioned")
        coef = np.linalg.solve(X.T @ X + self.ridge * np.eye(6), X.T @ w)
        m = np.array([[2.0 * coef[0], coef[1]], [coef[1], 2.0 * coef[2]]])
        operator = ShapeOperator2(m, tf)
        return SurfaceCurvature(operator, operator.gauss, operator.mean, tf)

    def segment_intersects(self, a: np.ndarray, b: np.ndarray) -> bool:
        a, b = as_point(a), as_point(b)
        if np.any(self.contains(np.stack([a, b]))):
            return True
        length = np.linalg.norm(b - a)
        if length == 0:
            return False
        locations, _, _ = self.mesh.ray.intersects_location(
            ray_origins=a[None], ray_directions=((b - a) / length)[None]
        )
        if len(locations) == 0:
            return False
        return bool(np.any(np.linalg.norm(locations - a, axis=1) <= length))

    def volume_quadrature(self, level: int, radial_nodes: int = 8, skin: float = 0.05):
        """Signed cones from the centroid over every (subdivided) face.

        Signed cone indicators sum to the winding number, so the rule is exact in
        the limit for any closed, consistently wound surface.
        """
        vertices, faces, face_ids = self.surface_triangles(level)
        o = self.center
        a, b, c = (vertices[faces[:, i]] for i in range(3))
        mids = np.stack([(a + b) / 2, (b + c) / 2, (c + a) / 2], axis=1)
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        normals = self.mesh.face_normals[face_ids]
        height = np.einsum("ij,ij->i", a - o, normals)
        rho, w_rho = graded_radial_rule(radial_nodes, skin / self.bounding_radius)
        points = o + rho[:, None, None, None] * (mids[None] - o)
        weights = (rho**2 * w_rho)[:, None, None] * (height * areas / 3.0)[None, :, None]
        weights = np.broadcast_to(weights, points.shape[:-1])
        return points.reshape(-1, 3), weights.reshape(-1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_vertices": int(len(self.mesh.vertices)),
            "n_faces": int(len(self.mesh.faces)),
            "h_mesh": self.h_mesh,
        }


def load_mesh(path: Union[str, Path]) -> MeshObstacle:
    """Read the ASCII `v x y z` / `f i j k` (1-based) triangle format."""
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"mesh file not found: {path}")
    mesh = trimesh.load(str(path), file_type="obj", process=True)
    logger.info(f"Loaded mesh {path} ({len(mesh.vertices)} vertices)")
    return MeshObstacle.from_trimesh(mesh)


def write_mesh(path: Union[str, Path], mesh: trimesh.Trimesh):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(mesh.vertices, dtype=float)]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in np.asarray(mesh.faces)]
    Path(path).write_text("\n".join(lines) + "\n")
