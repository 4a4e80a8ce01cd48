import logging
from collections import namedtuple
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.optimize import minimize

from src.core.errors import (
    AsymptoticRegimeError,
    ConfigurationError,
    DegenerateDeterminantError,
    GeometryError,
)
from src.core.geometry import (
    Ball,
    SpheroidFrame,
    TangentFrame,
    as_point,
    broken_path_length,
    det_shape_diff,
)
from src.data.obstacle import ObstacleShape, QuadricObstacle
from src.data.reflector import min_broken_path

logger = logging.getLogger(__name__)

MAX_ADAPT_ITERATIONS = 40
MAX_TRIANGLES = 400_000
# a triangle is refined while its lower phi bound sits within HOT_WINDOW / tau
# of the minimum and it is wider than HOT_SIZE * sqrt(diameter / tau)
HOT_WINDOW = 30.0
HOT_SIZE = 0.25
LOG_4PI = float(np.log(4.0 * np.pi))

CDConstants = namedtuple("CDConstants", ["points", "balls", "valid"])
ReflectorTerm = namedtuple("ReflectorTerm", ["r", "r_prime", "det"])
SurfaceIntegral = namedtuple("SurfaceIntegral", ["values", "errors", "converged", "quadrature"])
LaplaceIntegrals = namedtuple("LaplaceIntegrals", ["taus", "log_i2", "log_i3", "log_combined", "sign"])


def _require_tau(tau):
    if np.any(np.asarray(tau) <= 0):
        raise ConfigurationError(f"Laplace parameter tau must be positive, got {tau}")


def log_yukawa_moment(z):
    """log M(z), M(z) = z cosh z - sinh z, without overflow or cancellation."""
    z = np.asarray(z, dtype=np.float64)
    flat = np.atleast_1d(z).astype(np.float64)
    out = np.empty_like(flat)
    small = flat < 0.1
    large = flat >= 2.0
    mid = ~small & ~large
    with np.errstate(divide="ignore"):
        zs = flat[small]
        out[small] = 3.0 * np.log(zs) + np.log(
            1.0 / 3.0 + zs**2 / 30.0 + zs**4 / 840.0 + zs**6 / 45360.0
        )
    zm = flat[mid]
    out[mid] = np.log(zm * np.cosh(zm) - np.sinh(zm))
    zl = flat[large]
    out[large] = zl + np.log(0.5 * (zl - 1.0) + 0.5 * (zl + 1.0) * np.exp(-2.0 * zl))
    return out.reshape(z.shape) if z.ndim else float(out[0])


def yukawa_moment(z):
    return np.exp(log_yukawa_moment(z))


def _sinhc_shifted(x, shift):
    """e^{-shift} sinh(x) / x for x >= 0, finite for large arguments."""
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x > 1e-4, x, 1.0)
    big = (np.exp(x - shift) - np.exp(-x - shift)) / (2.0 * safe)
    series = np.exp(-shift) * (1.0 + x**2 / 6.0)
    return np.where(x > 1e-4, big, series)


@dataclass
class YukawaBallField:
    """v solving (Delta - tau^2) v + chi_B = 0 in R^3, in closed form."""

    ball: Ball
    tau: float

    def __post_init__(self):
        _require_tau(self.tau)
        self.tau = float(self.tau)

    @property
    def z(self) -> float:
        return self.tau * self.ball.radius

    @property
    def log_M(self) -> float:
        return log_yukawa_moment(self.z)

    @property
    def M(self) -> float:
        return float(np.exp(self.log_M))

    def log_exterior(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        return self.log_M - self.tau * r - 3.0 * np.log(self.tau) - np.log(r)

    def _radius(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(x, dtype=np.float64) - self.ball.center, axis=-1)

    def value(self, x: np.ndarray) -> np.ndarray:
        tau, eta = self.tau, self.ball.radius
        r = self._radius(x)
        outside = r >= eta
        r_out = np.where(outside, r, max(eta, 1e-300))
        exterior = np.exp(self.log_exterior(r_out))
        r_in = np.minimum(r, eta)
        interior = (1.0 - (1.0 + self.z) * _sinhc_shifted(tau * r_in, self.z)) / tau**2
        return np.where(outside, exterior, interior)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        tau, eta = self.tau, self.ball.radius
        d = np.asarray(x, dtype=np.float64) - self.ball.center
        r = np.linalg.norm(d, axis=-1)
        outside = r >= eta
        r_safe = np.where(r > 0, r, 1.0)
        r_out = np.where(outside, r, max(eta, 1e-300))
        radial_out = -np.exp(self.log_exterior(r_out)) * (1.0 + tau * r_out) / r_out
        # d/dr of -(1 + z) e^{-z} sinh(tau r) / (tau^3 r)
        tr = tau * np.minimum(r, eta)
        cosh_s = 0.5 * (np.exp(tr - self.z) + np.exp(-tr - self.z))
        sinh_s = 0.5 * (np.exp(tr - self.z) - np.exp(-tr - self.z))
        core = np.where(tr > 1e-3, (tr * cosh_s - sinh_s) / r_safe**2, np.exp(-self.z) * tau**3 * r / 3.0)
        radial_in = -(1.0 + self.z) * core / tau**3
        radial = np.where(outside, radial_out, radial_in)
        return (radial / r_safe)[..., None] * d


def yukawa_ball(x: np.ndarray, ball: Ball, tau: float):
    """(value, gradient) of the ball's Yukawa potential at x."""
    field = YukawaBallField(ball, tau)
    return field.value(x), field.gradient(x)


def yukawa_ball_quadrature(x: np.ndarray, ball: Ball, tau: float, epsrel: float = 1e-11) -> float:
    """Direct quadrature of int_B e^{-tau|x-y|} / (4 pi |x-y|) dy.

    Axisymmetric about the line through x and the center; integrating over the
    distance R = |x - y| instead of the polar angle removes the 1/R singularity.
    """
    _require_tau(tau)
    r = float(np.linalg.norm(as_point(x) - ball.center))
    eta = ball.radius
    if r == 0.0:
        value, _ = integrate.quad(lambda rho: rho * np.exp(-tau * rho), 0.0, eta, epsrel=epsrel)
        return value

    def inner(R, rho):
        return rho * np.exp(-tau * R) / (2.0 * r)

    value, _ = integrate.dblquad(
        inner,
        0.0,
        eta,
        lambda rho: abs(r - rho),
        lambda rho: r + rho,
        epsabs=0.0,
        epsrel=epsrel,
    )
    return value


def log_ball_ball_integral(ball: Ball, ball_prime: Ball, tau: float) -> float:
    """log of int_B v_g dx = 4 pi M M' e^{-tau d} / (tau^6 d)."""
    _require_tau(tau)
    d = float(np.linalg.norm(ball.center - ball_prime.center))
    if d <= ball.radius + ball_prime.radius:
        raise GeometryError(
            f"balls overlap: |p - p'| = {d} <= eta + eta' = {ball.radius + ball_prime.radius}"
        )
    moments = log_yukawa_moment(tau * ball.radius) + log_yukawa_moment(tau * ball_prime.radius)
    return LOG_4PI + moments - tau * d - 6.0 * np.log(tau) - np.log(d)


def ball_ball_integral(ball: Ball, ball_prime: Ball, tau: float) -> float:
    return float(np.exp(log_ball_ball_integral(ball, ball_prime, tau)))


def _uniform_in_ball(rng: np.random.Generator, ball: Ball, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return ball.center + ball.radius * np.cbrt(rng.uniform(size=(n, 1))) * v


def ball_ball_monte_carlo(
    ball: Ball,
    ball_prime: Ball,
    tau: float,
    n_samples: int = 10_000_000,
    seed: int = 0,
    chunk: int = 1_000_000,
):
    """Seeded Monte Carlo estimate of the double ball integral, with its standard error."""
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        R = np.linalg.norm(_uniform_in_ball(rng, ball, n) - _uniform_in_ball(rng, ball_prime, n), axis=1)
        k = np.exp(-tau * R) / (4.0 * np.pi * R)
        total += k.sum()
        total_sq += (k**2).sum()
        done += n
    mean = total / n_samples
    var = max(total_sq / n_samples - mean**2, 0.0)
    scale = ball.volume * ball_prime.volume
    return scale * mean, scale * np.sqrt(var / n_samples)


@dataclass
class JEvaluation:
    tau: float
    log_value: float
    sign: float
    method: str
    converged: bool = True
    rtol: float = 0.0
    n_nodes: int = 0

    @property
    def value(self) -> float:
        return float(self.sign * np.exp(self.log_value))

    def to_dict(self) -> dict:
        return {
            "tau": float(self.tau),
            "log_value": float(self.log_value),
            "sign": float(self.sign),
            "method": self.method,
            "converged": bool(self.converged),
            "rtol": float(self.rtol),
            "n_nodes": int(self.n_nodes),
        }


@dataclass
class SurfaceQuadrature:
    """A fixed degree-2 rule on the obstacle surface, reusable across integrands."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    converged: bool = True
    rtol: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    def integrate(self, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        return np.atleast_2d(integrand(self.points, self.normals)) @ self.weights


def split_triangles(tri: np.ndarray) -> np.ndarray:
    """4-way midpoint split of (n, 3, 3) triangles."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    return np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )


def fixed_ratio_marking(errors: np.ndarray, ratio: float = 0.9) -> np.ndarray:
    """Smallest set of elements carrying `ratio` of the total error."""
    marked = np.zeros(len(errors), dtype=bool)
    total = errors.sum()
    if total <= 0:
        return marked
    order = np.argsort(-errors, kind="stable")
    n_mark = int(np.searchsorted(np.cumsum(errors[order]), ratio * total)) + 1
    marked[order[:n_mark]] = True
    return marked


class _TriangleRules:
    """Centroid (degree 1) and edge-midpoint (degree 2) rules on lifted triangles."""

    def __init__(self, obstacle: ObstacleShape, tri: np.ndarray, face_ids: np.ndarray):
        n = len(tri)
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        t1, t2 = b - a, c - a
        area = 0.5 * np.linalg.norm(np.cross(t1, t2), axis=1)
        params = np.concatenate([(a + b + c) / 3, (a + b) / 2, (b + c) / 2, (c + a) / 2])
        points, normals = obstacle.lift(params, np.tile(face_ids, 4))
        density = obstacle.area_density(params, np.tile(t1, (4, 1)), np.tile(t2, (4, 1)))
        weights = np.tile(area, 4) * density
        weights[n:] /= 3.0
        self.n = n
        self.points = points
        self.normals = normals
        self.weights = weights

    def mids(self):
        n = self.n
        return self.points[n:], self.normals[n:], self.weights[n:]

    def apply(self, integrand) -> tuple:
        n = self.n
        f = np.atleast_2d(integrand(self.points, self.normals)) * self.weights
        q1 = f[:, :n]
        q3 = f[:, n : 2 * n] + f[:, 2 * n : 3 * n] + f[:, 3 * n :]
        return q1, q3

    def hot(self, phi, window: float, target: float) -> np.ndarray:
        n = self.n
        values = phi(self.points).reshape(4, n)
        m = self.points[n:].reshape(3, n, 3)
        half = np.max(
            [np.linalg.norm(m[i] - m[(i + 1) % 3], axis=1) for i in range(3)], axis=0
        )
        diam = 2.0 * half
        return (values.min(axis=0) - diam <= window) & (diam > target)


def integrate_surface(
    obstacle: ObstacleShape,
    integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
    phi: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    phi0: float = 0.0,
    tau_max: float = 1.0,
    hot_margin: float = 0.0,
    rtol: float = 1e-4,
    base_level: Optional[int] = None,
    max_triangles: int = MAX_TRIANGLES,
) -> SurfaceIntegral:
    """Adaptive integration of one or more integrands over the obstacle surface.

    Triangles are refined where the centroid and edge-midpoint rules disagree
    most (fixed-ratio marking) and, when phi is given, wherever e^{-tau phi}
    may still be large on a coarse triangle. Stops when the estimated error
    and the change between sweeps both drop below rtol.

    Args:
        integrand: (points, normals) -> (k, n) or (n,) values.
        phi: phase function for importance refinement.
        phi0: reference phase (integrands are assumed scaled by e^{tau phi0}).
        tau_max: largest decay rate present in the integrands.
        hot_margin: extra phase window refined to full resolution.
    """
    if base_level is None:
        base_level = 3 if isinstance(obstacle, QuadricObstacle) else 0
    vertices, faces, face_ids = obstacle.surface_triangles(base_level)
    tri = vertices[faces]
    ids = np.asarray(face_ids)
    target = HOT_SIZE * np.sqrt(obstacle.diameter / tau_max)
    window = phi0 + hot_margin + HOT_WINDOW / tau_max

    def evaluate(t, i):
        rules = _TriangleRules(obstacle, t, i)
        q1, q3 = rules.apply(integrand)
        hot = rules.hot(phi, window, target) if phi is not None else np.zeros(len(t), dtype=bool)
        points, normals, weights = rules.mids()
        return q1, q3, hot, points.reshape(3, -1, 3), normals.reshape(3, -1, 3), weights.reshape(3, -1)

    q1, q3, hot, mp, mn, mw = evaluate(tri, ids)
    previous = None
    converged = False
    rel_err = np.inf
    for iteration in range(MAX_ADAPT_ITERATIONS):
        total = q3.sum(axis=1)
        scale = np.maximum(np.abs(total), np.finfo(float).tiny)
        per_tri = (np.abs(q3 - q1) / scale[:, None]).max(axis=0)
        rel_err = float(per_tri.sum())
        change = np.inf if previous is None else float(np.max(np.abs(total - previous) / scale))
        if not hot.any() and rel_err <= rtol and change <= rtol:
            converged = True
            break
        if len(tri) >= max_triangles:
            break
        marked = fixed_ratio_marking(per_tri) | hot
        children = split_triangles(tri[marked])
        child_ids = np.repeat(ids[marked][None], 4, axis=0).reshape(-1)
        c_q1, c_q3, c_hot, c_mp, c_mn, c_mw = evaluate(children, child_ids)
        keep = ~marked
        tri = np.concatenate([tri[keep], children])
        ids = np.concatenate([ids[keep], child_ids])
        q1 = np.concatenate([q1[:, keep], c_q1], axis=1)
        q3 = np.concatenate([q3[:, keep], c_q3], axis=1)
        hot = np.concatenate([hot[keep], c_hot])
        mp = np.concatenate([mp[:, keep], c_mp], axis=1)
        mn = np.concatenate([mn[:, keep], c_mn], axis=1)
        mw = np.concatenate([mw[:, keep], c_mw], axis=1)
        previous = total

    if not converged:
        logger.warning(
            f"Surface quadrature stopped at {len(tri)} triangles with estimated "
            f"relative error {rel_err:.2e} (target {rtol:.1e})"
        )
    quadrature = SurfaceQuadrature(
        points=mp.reshape(-1, 3),
        normals=mn.reshape(-1, 3),
        weights=mw.reshape(-1),
        converged=converged,
        rtol=rel_err,
    )
    values = q3.sum(axis=1)
    return SurfaceIntegral(values, np.abs(q3 - q1).sum(axis=1), converged, quadrature)


def require_hull_disjoint(obstacle: ObstacleShape, ball: Ball, ball_prime: Ball):
    clearance = obstacle.hull_clearance(ball, ball_prime)
    if clearance <= 0:
        raise ConfigurationError(
            f"convex hull of B and B' meets the obstacle (clearance {clearance:.4g})"
        )


def phase_floor(obstacle: ObstacleShape, p: np.ndarray, p_prime: np.ndarray) -> float:
    """Sampled minimum of phi, used to scale exponentials."""
    points, _ = obstacle.surface_samples()
    return float(broken_path_length(points, p, p_prime).min())


def _j_integrand(ball: Ball, ball_prime: Ball, taus: np.ndarray, phi0: float):
    p, p_prime = ball.center, ball_prime.center

    def integrand(x, nu):
        dp = p - x
        r = np.linalg.norm(dp, axis=1)
        r_prime = np.linalg.norm(x - p_prime, axis=1)
        flux = np.einsum("ij,ij->i", dp, nu) / (r**3 * r_prime)
        t = taus[:, None]
        return flux * (1.0 + t * r) * np.exp(-t * (r + r_prime - phi0))

    return integrand


def _j_prefactor(ball: Ball, ball_prime: Ball, taus: np.ndarray, phi0: float) -> np.ndarray:
    return (
        log_yukawa_moment(taus * ball.radius)
        + log_yukawa_moment(taus * ball_prime.radius)
        - 6.0 * np.log(taus)
        - taus * phi0
    )


def _as_evaluations(log_prefactor, values, taus, method, converged, rtol, n_nodes) -> List[JEvaluation]:
    out = []
    for tau, lp, v in zip(taus, log_prefactor, values):
        with np.errstate(divide="ignore"):
            out.append(
                JEvaluation(
                    tau=float(tau),
                    log_value=float(lp + np.log(abs(v))),
                    sign=float(np.sign(v)),
                    method=method,
                    converged=converged,
                    rtol=float(rtol),
                    n_nodes=int(n_nodes),
                )
            )
    return out


def build_sweep_quadrature(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    tau_max: float,
    hot_margin: float = 0.0,
    rtol: float = 1e-4,
) -> SurfaceQuadrature:
    """Surface rule resolved for all tau <= tau_max and for foci moved by up to
    hot_margin / 2 (scan sub-balls)."""
    taus = np.array([min(2.0, tau_max), tau_max], dtype=np.float64)
    phi0 = phase_floor(obstacle, ball.center, ball_prime.center)
    result = integrate_surface(
        obstacle,
        _j_integrand(ball, ball_prime, taus, phi0),
        phi=lambda x: broken_path_length(x, ball.center, ball_prime.center),
        phi0=phi0,
        tau_max=tau_max,
        hot_margin=hot_margin,
        rtol=rtol,
    )
    logger.info(f"Sweep quadrature: {result.quadrature.n_nodes} nodes (converged={result.converged})")
    return result.quadrature


def j_boundary_sweep(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    taus: Sequence[float],
    rtol: float = 1e-4,
    quadrature: Optional[SurfaceQuadrature] = None,
    check: bool = True,
) -> List[JEvaluation]:
    """J(tau) = int_dD (dv_f / dnu) v_g dS for every tau, one adaptive rule."""
    taus = np.asarray(taus, dtype=np.float64)
    _require_tau(taus)
    if check:
        require_hull_disjoint(obstacle, ball, ball_prime)
    p, p_prime = ball.center, ball_prime.center
    if quadrature is None:
        phi0 = phase_floor(obstacle, p, p_prime)
        result = integrate_surface(
            obstacle,
            _j_integrand(ball, ball_prime, taus, phi0),
            phi=lambda x: broken_path_length(x, p, p_prime),
            phi0=phi0,
            tau_max=float(taus.max()),
            rtol=rtol,
        )
        values, converged = result.values, result.converged
        achieved, n_nodes = result.quadrature.rtol, result.quadrature.n_nodes
    else:
        phi0 = float(broken_path_length(quadrature.points, p, p_prime).min())
        values = quadrature.integrate(_j_integrand(ball, ball_prime, taus, phi0))
        converged, achieved, n_nodes = quadrature.converged, quadrature.rtol, quadrature.n_nodes
    log_prefactor = _j_prefactor(ball, ball_prime, taus, phi0)
    return _as_evaluations(log_prefactor, values, taus, "boundary", converged, achieved, n_nodes)


def j_boundary(
    obstacle: ObstacleShape, ball: Ball, ball_prime: Ball, tau: float, rtol: float = 1e-4
) -> JEvaluation:
    return j_boundary_sweep(obstacle, ball, ball_prime, [tau], rtol=rtol)[0]


def volume_kernel(x: np.ndarray, ball: Ball, ball_prime: Ball, tau: float) -> np.ndarray:
    """(grad v_f . grad v_g + tau^2 v_f v_g) / (v_f v_g) at points outside both balls."""
    dp = ball.center - np.asarray(x)
    dq = ball_prime.center - np.asarray(x)
    r = np.linalg.norm(dp, axis=-1)
    r_prime = np.linalg.norm(dq, axis=-1)
    cos = np.einsum("...i,...i->...", dp, dq) / (r * r_prime)
    return cos * (1.0 + tau * r) * (1.0 + tau * r_prime) / (r * r_prime) + tau**2


def _volume_sum(obstacle, ball, ball_prime, tau, level, radial_nodes, phi0, chunk=262_144) -> float:
    points, weights = obstacle.volume_quadrature(level, radial_nodes, skin=1.0 / tau)
    total = 0.0
    for start in range(0, len(points), chunk):
        x = points[start : start + chunk]
        r = np.linalg.norm(x - ball.center, axis=1)
        r_prime = np.linalg.norm(x - ball_prime.center, axis=1)
        k = volume_kernel(x, ball, ball_prime, tau)
        total += float(np.sum(weights[start : start + chunk] * k * np.exp(-tau * (r + r_prime - phi0)) / (r * r_prime)))
    return total


def j_volume(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    tau: float,
    levels: Sequence[int] = (4, 5),
    radial_nodes: int = 8,
    rtol: float = 1e-4,
) -> JEvaluation:
    """J as the volume integral over D of grad v_f . grad v_g + tau^2 v_f v_g.

    The angular rule is second order, so two icosphere levels are combined by
    Richardson extrapolation.
    """
    _require_tau(tau)
    require_hull_disjoint(obstacle, ball, ball_prime)
    phi0 = phase_floor(obstacle, ball.center, ball_prime.center)
    coarse, fine = (_volume_sum(obstacle, ball, ball_prime, tau, lv, radial_nodes, phi0) for lv in levels[:2])
    value = (4.0 * fine - coarse) / 3.0
    achieved = abs(value - fine) / max(abs(value), np.finfo(float).tiny)
    converged = achieved <= max(rtol, 1e-3)
    log_prefactor = _j_prefactor(ball, ball_prime, np.array([tau]), phi0)
    n_nodes = len(obstacle.volume_quadrature(levels[1], radial_nodes, skin=1.0 / tau)[1])
    return _as_evaluations(log_prefactor, [value], [tau], "volume", converged, achieved, n_nodes)[0]


def j_kernel_expansion(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    tau: float,
    full_product: bool = False,
    rtol: float = 1e-4,
) -> JEvaluation:
    """Large-tau kernel form of J.

    Leading term: (1 / 4 tau^3)(eta - 1/tau)(eta' - 1/tau) int (p - x).nu /
    (r^2 r') (1 + 1 / (tau r)) e^{-tau (d_B + d_B')} dS. With full_product the
    complete product of the two one-ball kernels is integrated instead.
    """
    _require_tau(tau)
    eta, eta_prime = ball.radius, ball_prime.radius
    if eta - 1.0 / tau <= 0 or eta_prime - 1.0 / tau <= 0:
        raise AsymptoticRegimeError(
            f"tau={tau} is outside the asymptotic regime: need eta - 1/tau > 0 and "
            f"eta' - 1/tau > 0 (eta={eta}, eta'={eta_prime})"
        )
    require_hull_disjoint(obstacle, ball, ball_prime)
    p, p_prime = ball.center, ball_prime.center
    phi0 = phase_floor(obstacle, p, p_prime)

    def integrand(x, nu):
        dp = p - x
        r = np.linalg.norm(dp, axis=1)
        r_prime = np.linalg.norm(x - p_prime, axis=1)
        flux = np.einsum("ij,ij->i", dp, nu) / r
        decay = np.exp(-tau * (r + r_prime - phi0))
        if not full_product:
            return flux * (1.0 + 1.0 / (tau * r)) * decay / (r * r_prime)
        chord = np.sqrt(np.clip(r**2 - eta**2, 0.0, None))
        chord_prime = np.sqrt(np.clip(r_prime**2 - eta_prime**2, 0.0, None))
        j2 = (eta - 1.0 / tau) * (1.0 + 1.0 / (tau * r)) / (tau * r) + np.exp(
            -tau * (chord - r + eta)
        ) * (chord + 1.0 / tau) / (tau**2 * r**2)
        j1 = (eta_prime - 1.0 / tau) / (tau * r_prime) + np.exp(
            -tau * (chord_prime - r_prime + eta_prime)
        ) / (tau**2 * r_prime)
        return j2 * flux * j1 * decay

    result = integrate_surface(
        obstacle,
        integrand,
        phi=lambda x: broken_path_length(x, p, p_prime),
        phi0=phi0,
        tau_max=tau,
        rtol=rtol,
    )
    shift = -tau * (phi0 - eta - eta_prime) - np.log(4.0 * tau)
    if not full_product:
        shift += np.log((eta - 1.0 / tau) * (eta_prime - 1.0 / tau)) - 2.0 * np.log(tau)
    method = "kernel_expansion_full" if full_product else "kernel_expansion"
    return _as_evaluations(
        [shift], result.values, [tau], method, result.converged, result.quadrature.rtol, result.quadrature.n_nodes
    )[0]


def laplace_integrals(
    obstacle: ObstacleShape,
    p: np.ndarray,
    p_prime: np.ndarray,
    taus: Sequence[float],
    rtol: float = 1e-4,
) -> LaplaceIntegrals:
    """I_m(tau) = int (p - x).nu / (r^m r') e^{-tau phi} dS for m = 2, 3, and
    I_2 + I_3 / tau, all as logarithms."""
    p, p_prime = as_point(p), as_point(p_prime)
    taus = np.asarray(taus, dtype=np.float64)
    _require_tau(taus)
    phi0 = phase_floor(obstacle, p, p_prime)

    def integrand(x, nu):
        dp = p - x
        r = np.linalg.norm(dp, axis=1)
        r_prime = np.linalg.norm(x - p_prime, axis=1)
        base = np.einsum("ij,ij->i", dp, nu) / (r**2 * r_prime)
        decay = np.exp(-taus[:, None] * (r + r_prime - phi0))
        return np.concatenate([base * decay, base / r * decay])

    result = integrate_surface(
        obstacle,
        integrand,
        phi=lambda x: broken_path_length(x, p, p_prime),
        phi0=phi0,
        tau_max=float(taus.max()),
        rtol=rtol,
    )
    n = len(taus)
    i2, i3 = result.values[:n], result.values[n:]
    combined = i2 + i3 / taus
    with np.errstate(divide="ignore"):
        return LaplaceIntegrals(
            taus=taus,
            log_i2=np.log(np.abs(i2)) - taus * phi0,
            log_i3=np.log(np.abs(i3)) - taus * phi0,
            log_combined=np.log(np.abs(combined)) - taus * phi0,
            sign=np.sign(combined),
        )


def _cd_angle(x, p, p_prime, eta: float = 0.0, eta_prime: float = 0.0):
    a, b = p - x, p_prime - x
    r = np.linalg.norm(a, axis=-1)
    r_prime = np.linalg.norm(b, axis=-1)
    cos = np.clip(np.einsum("...i,...i->...", a, b) / (r * r_prime), -1.0, 1.0)
    angle = np.arccos(cos)
    if eta > 0 or eta_prime > 0:
        angle = angle + np.arcsin(np.clip(eta / r, 0, 1)) + np.arcsin(np.clip(eta_prime / r_prime, 0, 1))
    return 1.0 + np.cos(np.minimum(np.pi, angle))


def c_d_constants(
    obstacle: ObstacleShape,
    p: np.ndarray,
    p_prime: np.ndarray,
    ball: Ball,
    ball_prime: Ball,
    level: Optional[int] = None,
    guard: float = 1e-8,
) -> CDConstants:
    """inf over x in D of 1 + cos of the angle at x subtended by the foci, and
    the same with the foci ranging over the closed balls.

    For balls the inner infimum is attained when both directions tilt apart by
    their angular radii, asin(eta / |x - p|) and asin(eta' / |x - p'|).
    """
    p, p_prime = as_point(p), as_point(p_prime)
    if obstacle.segment_intersects(p, p_prime) or obstacle.hull_clearance(ball, ball_prime) <= 0:
        logger.warning("C_D constants requested for a configuration violating the disjointness hypotheses")
        return CDConstants(0.0, 0.0, False)
    surface, _ = obstacle.surface_samples(level)
    interior, _ = obstacle.volume_quadrature(2 if isinstance(obstacle, QuadricObstacle) else 0, radial_nodes=4)
    candidates = np.concatenate([surface, interior])

    def infimum(eta, eta_prime):
        values = _cd_angle(candidates, p, p_prime, eta, eta_prime)
        best = candidates[int(np.argmin(values))]
        tf = TangentFrame.from_normal(best, obstacle.normal_at(obstacle.project(best)))

        def objective(sigma):
            x = obstacle.project(tf.embed(sigma))
            return float(_cd_angle(x, p, p_prime, eta, eta_prime))

        res = minimize(objective, np.zeros(2), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
        return float(min(values.min(), res.fun))

    points_value = infimum(0.0, 0.0)
    balls_value = infimum(ball.radius, ball_prime.radius)
    valid = points_value > guard and balls_value > guard
    return CDConstants(points_value, balls_value, bool(valid))


class AsymptoticKind(str, Enum):
    POINT_PAIR = "point_pair"
    BALL_PAIR = "ball_pair"
    MONOSTATIC = "monostatic"
    SHIFTED = "shifted"


def asymptotic_rhs(
    kind: AsymptoticKind,
    terms: Sequence[ReflectorTerm],
    eta: float = 0.0,
    eta_prime: float = 0.0,
    s: float = 0.0,
) -> float:
    """Limit constants of the Laplace-method asymptotics.

    point_pair: sum pi / (|q-p| |q-p'| sqrt det)
    ball_pair: (pi/2) sum (eta / |q-p|)(eta' / |q-p'|) / sqrt det
    monostatic: (pi/2)(eta / d)^2 sum 1 / sqrt P with P the monostatic polynomial
    shifted: (pi/2)(eta / |q-p|)((eta' - s) / (|q-p'| - s)) / sqrt det_s
    """
    kind = AsymptoticKind(kind)
    if not terms:
        raise GeometryError("asymptotic constant needs at least one reflection point")
    total = 0.0
    for term in terms:
        if term.det <= 0:
            raise DegenerateDeterminantError(
                f"det(S_E - S_D) = {term.det:.6g} <= 0: the curvature of the obstacle at "
                "the reflection point must stay below that of the enclosing spheroid"
            )
        root = np.sqrt(term.det)
        if kind is AsymptoticKind.POINT_PAIR:
            total += np.pi / (term.r * term.r_prime * root)
        elif kind is AsymptoticKind.BALL_PAIR:
            total += 0.5 * np.pi * (eta / term.r) * (eta_prime / term.r_prime) / root
        elif kind is AsymptoticKind.MONOSTATIC:
            total += 0.5 * np.pi * (eta / term.r) ** 2 / root
        else:
            total += 0.5 * np.pi * (eta / term.r) * ((eta_prime - s) / (term.r_prime - s)) / root
    return float(total)


def leading_coefficient(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    s: float = 0.0,
    kind: AsymptoticKind = AsymptoticKind.BALL_PAIR,
    level: Optional[int] = None,
) -> float:
    """The asymptotic constant computed from the geometry of the first reflector."""
    kind = AsymptoticKind(kind)
    p, p_prime = ball.center, ball_prime.center
    c_min, reflectors = min_broken_path(obstacle, p, p_prime, level=level)
    frame = SpheroidFrame(p, p_prime, c_min)
    terms = []
    for point in reflectors.points:
        r = float(np.linalg.norm(point.q - p))
        r_prime = float(np.linalg.norm(point.q - p_prime))
        det = det_shape_diff(point.q, obstacle, frame, s=s, eta_prime=ball_prime.radius)
        terms.append(ReflectorTerm(r, r_prime, det))
    return asymptotic_rhs(kind, terms, ball.radius, ball_prime.radius, s)
