import logging
from collections import namedtuple
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from einops import rearrange

from src.core.errors import GeometryError, NonStationaryPointError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-12
CROSS_TOL = 1e-8

SpheroidCurvature = namedtuple(
    "SpheroidCurvature", ["operator", "k1", "k2", "gauss", "mean"]
)
VariantResolution = namedtuple(
    "VariantResolution", ["variant", "max_errors", "n_configs", "seed"]
)


def as_point(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(3)


def unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise GeometryError("cannot normalise a zero vector")
    return v / n


def broken_path_length(x: np.ndarray, p: np.ndarray, p_prime: np.ndarray) -> np.ndarray:
    """|p - x| + |x - p'| for a point or a stack of points (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.linalg.norm(p - x, axis=-1) + np.linalg.norm(x - p_prime, axis=-1)


@dataclass
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = as_point(self.center)
        self.radius = float(self.radius)
        if self.radius < 0:
            raise GeometryError(f"ball radius must be non-negative, got {self.radius}")

    @property
    def volume(self) -> float:
        return 4.0 * np.pi * self.radius**3 / 3.0

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(x) - self.center, axis=-1) <= self.radius

    def contains_ball(self, other: "Ball", tol: float = 1e-12) -> bool:
        gap = np.linalg.norm(other.center - self.center) + other.radius
        return bool(gap <= self.radius + tol * max(1.0, self.radius))

    def shifted(self, s: float, omega: np.ndarray) -> "Ball":
        """The sub-ball B_{radius - s}(center + s * omega), tangent to this one."""
        if not 0.0 <= s < self.radius:
            raise GeometryError(
                f"shift s={s} must satisfy 0 <= s < radius={self.radius}"
            )
        return Ball(self.center + s * unit(as_point(omega)), self.radius - s)

    def surface_points(self, n: int) -> np.ndarray:
        """Fibonacci points on the bounding sphere."""
        k = np.arange(n) + 0.5
        z = 1.0 - 2.0 * k / n
        rho = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
        theta = np.pi * (1.0 + np.sqrt(5.0)) * k
        dirs = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
        return self.center + self.radius * dirs

    def lattice_quadrature(
        self, spacing: float, origin: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Lattice nodes covering the ball with one-cell mollified weights.

        The weights sum to the exact ball volume. Passing the FDTD grid origin
        puts every node on a grid point.
        """
        origin = np.zeros(3) if origin is None else as_point(origin)
        reach = self.radius + spacing
        lo = np.floor((self.center - reach - origin) / spacing).astype(int)
        hi = np.ceil((self.center + reach - origin) / spacing).astype(int)
        axes = [origin[k] + spacing * np.arange(lo[k], hi[k] + 1) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"))
        nodes = rearrange(grid, "c x y z -> (x y z) c")
        weights = self.lattice_weights(nodes, spacing)
        keep = weights > 0
        return nodes[keep], weights[keep]

    def lattice_weights(self, nodes: np.ndarray, spacing: float) -> np.ndarray:
        weights = smoothed_ball_indicator(nodes, self, spacing) * spacing**3
        total = weights.sum()
        if total <= 0:
            raise GeometryError("lattice does not resolve the ball")
        return weights * (self.volume / total)


def smoothed_ball_indicator(points: np.ndarray, ball: Ball, width: float) -> np.ndarray:
    """chi_B with a linear ramp of the given width across the sphere."""
    r = np.linalg.norm(np.asarray(points) - ball.center, axis=-1)
    return np.clip((ball.radius - r) / width + 0.5, 0.0, 1.0)


def convex_hull_distance(
    x: np.ndarray, ball: Ball, ball_prime: Ball, n_t: int = 257, chunk: int = 4096
) -> np.ndarray:
    """Signed distance from points to the convex hull of two balls.

    The hull is the union of the balls interpolating both centers and radii
    linearly, so the distance is a minimum over the interpolation parameter.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.linspace(0.0, 1.0, n_t)
    centers = (1.0 - t)[:, None] * ball.center + t[:, None] * ball_prime.center
    radii = (1.0 - t) * ball.radius + t * ball_prime.radius
    out = np.empty(len(x))
    for start in range(0, len(x), chunk):
        block = x[start : start + chunk]
        d = np.linalg.norm(block[:, None, :] - centers[None], axis=-1) - radii[None]
        out[start : start + chunk] = d.min(axis=1)
    return out


@dataclass
class SpheroidFrame:
    p: np.ndarray
    p_prime: np.ndarray
    c: float

    def __post_init__(self):
        self.p = as_point(self.p)
        self.p_prime = as_point(self.p_prime)
        self.c = float(self.c)
        if not self.c > self.focal_distance:
            raise GeometryError(
                f"spheroid parameter c={self.c} must exceed the focal distance "
                f"|p - p'|={self.focal_distance}"
            )

    @property
    def focal_distance(self) -> float:
        return float(np.linalg.norm(self.p - self.p_prime))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.p + self.p_prime)

    @property
    def semi_axes(self) -> Tuple[float, float]:
        """(major, minor) semi-axes of E_c."""
        d = self.focal_distance
        return 0.5 * self.c, 0.5 * np.sqrt(self.c**2 - d**2)

    @property
    def min_radial(self) -> float:
        """inf over directions of spheroid_radial, (c - |p - p'|) / 2."""
        return 0.5 * (self.c - self.focal_distance)

    def phi(self, x: np.ndarray) -> np.ndarray:
        return broken_path_length(x, self.p, self.p_prime)

    def to_dict(self) -> dict:
        major, minor = self.semi_axes
        return {
            "p": self.p.tolist(),
            "p_prime": self.p_prime.tolist(),
            "c": self.c,
            "semi_major": major,
            "semi_minor": minor,
        }


def spheroid_radial(omega: np.ndarray, frame: SpheroidFrame) -> np.ndarray:
    """s(omega; p, p', c): distance from p' to E_c along the unit direction omega."""
    delta = frame.p - frame.p_prime
    num = frame.c**2 - delta @ delta
    den = 2.0 * (frame.c - np.asarray(omega) @ delta)
    return num / den


def spheroid_point(omega: np.ndarray, frame: SpheroidFrame) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    s = spheroid_radial(omega, frame)
    return frame.p_prime + np.expand_dims(s, -1) * omega


def spheroid_inward_normal(
    x: np.ndarray, frame: SpheroidFrame, tol: float = 1e-8
) -> np.ndarray:
    x = as_point(x)
    _require_on_spheroid(x, frame, tol)
    geo = UnitPairGeometry.at(x, frame.p, frame.p_prime)
    if geo.gap <= tol:
        raise GeometryError(f"point {x} lies on the focal segment, the spheroid normal is undefined")
    return -(geo.A + geo.A_prime) / np.sqrt(2.0 * geo.gap)


def _require_on_spheroid(x: np.ndarray, frame: SpheroidFrame, tol: float):
    residual = abs(float(frame.phi(x)) - frame.c)
    if residual > tol * frame.c:
        raise GeometryError(
            f"point {x} is off E_c: |phi - c| = {residual:.3e} > {tol * frame.c:.3e}"
        )


@dataclass
class UnitPairGeometry:
    A: np.ndarray
    A_prime: np.ndarray
    dot: float
    cross: np.ndarray
    lam: float
    r: float
    r_prime: float

    @classmethod
    def at(cls, q: np.ndarray, p: np.ndarray, p_prime: np.ndarray) -> "UnitPairGeometry":
        q, p, p_prime = as_point(q), as_point(p), as_point(p_prime)
        r = float(np.linalg.norm(q - p))
        r_prime = float(np.linalg.norm(q - p_prime))
        if r == 0.0 or r_prime == 0.0:
            raise GeometryError("q coincides with a focus")
        A = (q - p) / r
        A_prime = (q - p_prime) / r_prime
        return cls(
            A=A,
            A_prime=A_prime,
            dot=float(A @ A_prime),
            cross=np.cross(A, A_prime),
            lam=1.0 / r + 1.0 / r_prime,
            r=r,
            r_prime=r_prime,
        )

    @property
    def gap(self) -> float:
        """1 + A.A'; zero only when q sits on the segment [p, p']."""
        return 1.0 + self.dot

    @property
    def focal_distance(self) -> float:
        return float(np.linalg.norm(self.r_prime * self.A_prime - self.r * self.A))

    @property
    def max_shift(self) -> float:
        return 0.5 * (self.r + self.r_prime - self.focal_distance)


@dataclass
class TangentFrame:
    q: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.q = as_point(self.q)
        self.e1, self.e2, self.nu = (as_point(v) for v in (self.e1, self.e2, self.nu))
        G = np.stack([self.e1, self.e2, self.nu])
        if np.max(np.abs(G @ G.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise GeometryError("tangent frame is not orthonormal")
        if np.cross(self.e1, self.e2) @ self.nu < 0:
            raise GeometryError("tangent frame is not right-handed")

    @classmethod
    def from_normal(
        cls, q: np.ndarray, nu: np.ndarray, hint: Optional[np.ndarray] = None
    ) -> "TangentFrame":
        """e1 along the tangential part of hint when it is usable, else Gram-Schmidt
        on the coordinate axis least aligned with nu."""
        nu = unit(as_point(nu))
        e1 = None
        if hint is not None:
            t = as_point(hint)
            t = t - (t @ nu) * nu
            if np.linalg.norm(t) > CROSS_TOL:
                e1 = unit(t)
        if e1 is None:
            axis = np.eye(3)[np.argmin(np.abs(nu))]
            e1 = unit(axis - (axis @ nu) * nu)
        e2 = np.cross(nu, e1)
        return cls(q=q, e1=e1, e2=e2, nu=nu)

    @property
    def basis(self) -> np.ndarray:
        """(3, 2) matrix with e1, e2 as columns."""
        return np.column_stack([self.e1, self.e2])

    def coordinates(self, v: np.ndarray) -> np.ndarray:
        return self.basis.T @ np.asarray(v)

    def embed(self, sigma: np.ndarray) -> np.ndarray:
        return self.q + self.basis @ np.asarray(sigma)


@dataclass
class ShapeOperator2:
    m: np.ndarray
    frame: Optional[TangentFrame] = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64).reshape(2, 2)
        scale = max(1.0, float(np.max(np.abs(self.m))))
        if np.max(np.abs(self.m - self.m.T)) > ORTHONORMAL_TOL * scale:
            raise GeometryError(f"shape operator is not symmetric: {self.m}")
        self.m = 0.5 * (self.m + self.m.T)

    def principal(self) -> Tuple[np.ndarray, np.ndarray]:
        """Principal curvatures in decreasing order and their (2, 2) eigenvectors."""
        w, v = np.linalg.eigh(self.m)
        return w[::-1], v[:, ::-1]

    @property
    def gauss(self) -> float:
        return float(np.linalg.det(self.m))

    @property
    def mean(self) -> float:
        return 0.5 * float(np.trace(self.m))

    def principal_directions(self) -> np.ndarray:
        """Eigenvectors embedded in R^3, rows ordered like principal()."""
        if self.frame is None:
            raise GeometryError("shape operator has no tangent frame")
        _, v = self.principal()
        return (self.frame.basis @ v).T

    def to_3d(self) -> np.ndarray:
        if self.frame is None:
            raise GeometryError("shape operator has no tangent frame")
        E = self.frame.basis
        return E @ self.m @ E.T

    def quadratic(self, v: np.ndarray) -> float:
        """S v . v for a vector of R^3 (its tangential part is used)."""
        c = self.frame.coordinates(v)
        return float(c @ self.m @ c)

    def in_frame(self, frame: TangentFrame, tol: float = 1e-6) -> "ShapeOperator2":
        if self.frame is None:
            raise GeometryError("shape operator has no tangent frame")
        if abs(self.frame.nu @ frame.nu) < 1.0 - tol:
            raise GeometryError(
                "tangent frames do not share a tangent plane: "
                f"nu.nu' = {self.frame.nu @ frame.nu:.9f}"
            )
        F = frame.basis
        m = F.T @ self.to_3d() @ F
        return ShapeOperator2(0.5 * (m + m.T), frame)


def spheroid_operator_3d(x: np.ndarray, frame: SpheroidFrame) -> np.ndarray:
    """gamma (I - A(x)A(x)/2 - A'(x)A'(x)/2), gamma = lambda / sqrt(2(1 + A.A'))."""
    geo = UnitPairGeometry.at(x, frame.p, frame.p_prime)
    gamma = geo.lam / np.sqrt(2.0 * geo.gap)
    return gamma * (
        np.eye(3) - 0.5 * np.outer(geo.A, geo.A) - 0.5 * np.outer(geo.A_prime, geo.A_prime)
    )


def spheroid_shape_operator(
    x: np.ndarray, frame: SpheroidFrame, tol: float = 1e-8
) -> SpheroidCurvature:
    """Shape operator of E_c at x in a tangent frame with e1 along A x A'.

    With this basis the matrix is diag(k1, k2): k1 = lambda / sqrt(2(1 + A.A'))
    and k2 = lambda sqrt(1 + A.A') / (2 sqrt 2). K = lambda^2 / 4 and
    H = lambda (3 + A.A') / (4 sqrt(2(1 + A.A'))).
    """
    x = as_point(x)
    nu = spheroid_inward_normal(x, frame, tol)
    geo = UnitPairGeometry.at(x, frame.p, frame.p_prime)
    tf = TangentFrame.from_normal(x, nu, hint=geo.cross)
    E = tf.basis
    m = E.T @ spheroid_operator_3d(x, frame) @ E
    operator = ShapeOperator2(0.5 * (m + m.T), tf)
    root = np.sqrt(2.0 * geo.gap)
    k1 = geo.lam / root
    k2 = geo.lam * np.sqrt(geo.gap) / (2.0 * np.sqrt(2.0))
    gauss = geo.lam**2 / 4.0
    mean = geo.lam * (3.0 + geo.dot) / (4.0 * root)
    return SpheroidCurvature(operator, k1, k2, gauss, mean)


def snell_normal(geo: UnitPairGeometry, tol: float = 1e-10) -> np.ndarray:
    """nu_q = -(A + A') / sqrt(2(1 + A.A'))."""
    if geo.gap <= tol:
        raise GeometryError(
            f"1 + A.A' = {geo.gap:.3e}: q lies on the segment [p, p'] and has no "
            "reflection normal"
        )
    return -(geo.A + geo.A_prime) / np.sqrt(2.0 * geo.gap)


def snell_residual(geo: UnitPairGeometry, nu: np.ndarray) -> float:
    return float(np.linalg.norm(geo.A + geo.A_prime + np.sqrt(2.0 * geo.gap) * nu))


def hessian_phi_chart(
    q: np.ndarray,
    tf: TangentFrame,
    p: np.ndarray,
    p_prime: np.ndarray,
    height: Callable[[np.ndarray], float],
    h: Optional[float] = None,
    stationary_tol: float = 1e-6,
) -> np.ndarray:
    """Central-difference Hessian of sigma -> phi(x_q(sigma); p, p') at sigma = 0.

    x_q(sigma) = q + sigma_1 e1 + sigma_2 e2 + f(sigma) nu with f the outward
    height chart of the obstacle.

    Args:
        q: point on the surface.
        tf: tangent frame at q with nu the outward normal.
        height: chart function f(sigma), f(0) = 0.
        h: difference step, 1e-4 times min(|q - p|, |q - p'|) by default.
        stationary_tol: largest accepted |grad phi| at q.
    """
    q, p, p_prime = as_point(q), as_point(p), as_point(p_prime)
    if h is None:
        h = 1e-4 * min(np.linalg.norm(q - p), np.linalg.norm(q - p_prime))

    def phi(s1: float, s2: float) -> float:
        sigma = np.array([s1, s2])
        x = q + tf.basis @ sigma + height(sigma) * tf.nu
        return float(broken_path_length(x, p, p_prime))

    f0 = phi(0.0, 0.0)
    fp1, fm1 = phi(h, 0.0), phi(-h, 0.0)
    fp2, fm2 = phi(0.0, h), phi(0.0, -h)
    grad = np.array([fp1 - fm1, fp2 - fm2]) / (2.0 * h)
    if np.linalg.norm(grad) > stationary_tol:
        raise NonStationaryPointError(
            f"q={q} is not stationary for phi on the surface: |grad| = "
            f"{np.linalg.norm(grad):.3e}"
        )
    h11 = (fp1 - 2.0 * f0 + fm1) / h**2
    h22 = (fp2 - 2.0 * f0 + fm2) / h**2
    h12 = (phi(h, h) - phi(h, -h) - phi(-h, h) + phi(-h, -h)) / (4.0 * h**2)
    return np.array([[h11, h12], [h12, h22]])


def hessian_phi_closed_form(
    geo: UnitPairGeometry, spheroid: ShapeOperator2, obstacle: ShapeOperator2
) -> np.ndarray:
    """sqrt(2(1 + A.A')) (S_E - S_D) in the spheroid's tangent basis."""
    diff = spheroid.m - obstacle.in_frame(spheroid.frame).m
    return np.sqrt(2.0 * geo.gap) * diff


def shifted_frame(q: np.ndarray, p: np.ndarray, p_prime: np.ndarray, s: float) -> SpheroidFrame:
    """E_{c-s}(p, p' + s A') through q, with c = phi(q; p, p')."""
    geo = UnitPairGeometry.at(q, p, p_prime)
    return SpheroidFrame(p, as_point(p_prime) + s * geo.A_prime, geo.r + geo.r_prime - s)


def shifted_difference_det(
    q: np.ndarray, p: np.ndarray, p_prime: np.ndarray, S_D: ShapeOperator2, s: float
) -> float:
    """det(S_q(E_{c-s}(p, p' + s A')) - S_q(dD)) by direct eigen-algebra."""
    spheroid = spheroid_shape_operator(q, shifted_frame(q, p, p_prime, s)).operator
    diff = spheroid.m - S_D.in_frame(spheroid.frame).m
    return float(np.linalg.det(diff))


def det_shape_diff(
    q: np.ndarray,
    obstacle,
    frame: SpheroidFrame,
    s: float = 0.0,
    eta_prime: Optional[float] = None,
) -> float:
    limit = frame.min_radial if eta_prime is None else min(eta_prime, frame.min_radial)
    if not 0.0 <= s < limit:
        raise GeometryError(f"shift s={s} outside [0, {limit:.6g})")
    S_D = obstacle.shape_operator_at(q).operator
    return shifted_difference_det(q, frame.p, frame.p_prime, S_D, s)


class DeterminantVariant(str, Enum):
    """Coefficient in front of S_D(AxA').(AxA') / (1 + A.A') in the closed form."""

    HALF = "half"
    QUARTER = "quarter"

    @property
    def kappa(self) -> float:
        return 0.5 if self is DeterminantVariant.HALF else 0.25


def closed_form_det(
    geo: UnitPairGeometry,
    S_D: ShapeOperator2,
    s: float,
    variant: DeterminantVariant,
    eta_prime: Optional[float] = None,
) -> float:
    """Closed form of det(S_E(shifted) - S_D) from K_D, H_D and S_D(AxA').(AxA')."""
    limit = geo.max_shift if eta_prime is None else min(eta_prime, geo.max_shift)
    if not 0.0 <= s < limit:
        raise GeometryError(f"shift s={s} outside [0, {limit:.6g})")
    variant = DeterminantVariant(variant)
    lam_s = 1.0 / geo.r + 1.0 / (geo.r_prime - s)
    combination = S_D.mean - variant.kappa * S_D.quadratic(geo.cross) / geo.gap
    return (
        lam_s**2 / 4.0
        - np.sqrt(2.0 / geo.gap) * lam_s * combination
        + S_D.gauss
    )


def monostatic_polynomial(mu: float, S_D: ShapeOperator2) -> float:
    """P(mu) = (mu - k1)(mu - k2) = mu^2 - 2 H mu + K."""
    return mu**2 - 2.0 * S_D.mean * mu + S_D.gauss


def bistatic_deviation(
    geo: UnitPairGeometry, S_D: ShapeOperator2, variant: DeterminantVariant
) -> float:
    """det(S_E - S_D) - P(lambda / 2); vanishes when A = A'."""
    return closed_form_det(geo, S_D, 0.0, variant) - monostatic_polynomial(0.5 * geo.lam, S_D)


def random_reflection_configuration(rng: np.random.Generator):
    """A point q with tangent frame, foci p, p' obeying the reflection law at q,
    a random symmetric S_D and an admissible shift."""
    q = rng.normal(size=3)
    tf = TangentFrame.from_normal(q, rng.normal(size=3))
    alpha = rng.uniform(0.1, 1.4)
    beta = rng.uniform(0.0, 2.0 * np.pi)
    t = np.cos(beta) * tf.e1 + np.sin(beta) * tf.e2
    A = -np.cos(alpha) * tf.nu + np.sin(alpha) * t
    A_prime = -np.cos(alpha) * tf.nu - np.sin(alpha) * t
    r, r_prime = rng.uniform(1.5, 6.0, size=2)
    p, p_prime = q - r * A, q - r_prime * A_prime
    a, b, c = rng.uniform(-2.0, 0.5, size=3)
    S_D = ShapeOperator2(np.array([[a, b], [b, c]]), tf)
    geo = UnitPairGeometry.at(q, p, p_prime)
    s = rng.uniform(0.0, 0.9) * geo.max_shift
    return q, p, p_prime, S_D, s


@lru_cache(maxsize=8)
def resolve_determinant_variant(
    n_configs: int = 100, seed: int = 0, tol: float = 1e-9
) -> VariantResolution:
    """Pick the closed-form variant that reproduces the direct determinant.

    Raises GeometryError unless exactly one variant matches on every
    configuration.
    """
    rng = np.random.default_rng(seed)
    errors = {v: [] for v in DeterminantVariant}
    for _ in range(n_configs):
        q, p, p_prime, S_D, s = random_reflection_configuration(rng)
        direct = shifted_difference_det(q, p, p_prime, S_D, s)
        geo = UnitPairGeometry.at(q, p, p_prime)
        for variant in DeterminantVariant:
            closed = closed_form_det(geo, S_D, s, variant)
            errors[variant].append(abs(closed - direct) / max(1.0, abs(direct)))

    max_errors = {v.value: float(np.max(e)) for v, e in errors.items()}
    winners = [v for v in DeterminantVariant if max_errors[v.value] <= tol]
    if len(winners) != 1:
        raise GeometryError(
            f"closed-form determinant variants are not separable: {max_errors}"
        )
    logger.info(f"Closed-form determinant variant: {winners[0].value} ({max_errors})")
    return VariantResolution(winners[0], max_errors, n_configs, seed)
