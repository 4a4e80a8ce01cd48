import concurrent.futures
import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from src.core.errors import (
    DegenerateReflectorError,
    GeometryError,
    ShadowConfigurationError,
)
from src.core.geometry import (
    Ball,
    TangentFrame,
    UnitPairGeometry,
    as_point,
    broken_path_length,
    snell_residual,
    unit,
)
from src.data.obstacle import MeshObstacle, ObstacleShape, QuadricObstacle, unit_icosphere

logger = logging.getLogger(__name__)

ReflectionPoint = namedtuple("ReflectionPoint", ["q", "normal", "phi", "snell_residual"])
TThresholds = namedtuple("TThresholds", ["first_arrival", "scan", "omega_max"])

MAX_CLUSTERS = 64
# relative phi tolerance for seed minima on one continuum
BAND_RTOL = 1e-7


@dataclass
class ReflectorSet:
    """Clustered global minimisers of phi(.; p, p') over the obstacle surface."""

    p: np.ndarray
    p_prime: np.ndarray
    c_min: float
    points: List[ReflectionPoint]
    cluster_tolerance: float
    n_clusters: int = 0
    degenerate: bool = False
    sample_spacing: float = 0.0
    n_samples: int = 0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_singleton(self) -> bool:
        return len(self.points) == 1 and not self.degenerate

    def single(self) -> ReflectionPoint:
        if not self.is_singleton:
            raise DegenerateReflectorError(
                f"expected a single first reflection point, found {self.n_clusters} "
                f"cluster(s){' (degenerate band)' if self.degenerate else ''}"
            )
        return self.points[0]

    def to_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "p_prime": self.p_prime.tolist(),
            "c_min": float(self.c_min),
            "cluster_tolerance": float(self.cluster_tolerance),
            "n_clusters": int(self.n_clusters),
            "degenerate": bool(self.degenerate),
            "sample_spacing": float(self.sample_spacing),
            "points": [
                {
                    "q": pt.q.tolist(),
                    "normal": pt.normal.tolist(),
                    "phi": float(pt.phi),
                    "snell_residual": float(pt.snell_residual),
                }
                for pt in self.points
            ],
        }


def check_configuration(obstacle: ObstacleShape, p: np.ndarray, p_prime: np.ndarray):
    if np.any(obstacle.contains(np.stack([p, p_prime]))):
        raise GeometryError(f"foci p={p}, p'={p_prime} must lie outside the obstacle")
    if obstacle.segment_intersects(p, p_prime):
        raise ShadowConfigurationError(
            f"segment [p, p'] = [{p}, {p_prime}] meets the obstacle (shadow configuration)"
        )


def link_components(points: np.ndarray, radius: float) -> Tuple[int, np.ndarray]:
    """Single-linkage clusters of points closer than radius."""
    n = len(points)
    if n == 0:
        return 0, np.zeros(0, dtype=int)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])) if len(pairs) else ([], ([], [])),
        shape=(n, n),
    )
    return connected_components(graph, directed=False)


def farthest_point_seeds(points: np.ndarray, start: int, k: int) -> List[int]:
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(1, min(k, len(points))):
        nxt = int(np.argmax(dist))
        if dist[nxt] == 0:
            break
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def refine_on_quadric(
    obstacle: QuadricObstacle,
    seed: np.ndarray,
    p: np.ndarray,
    p_prime: np.ndarray,
    rounds: int = 3,
) -> np.ndarray:
    """BFGS on the ellipsoid parametrised by the unit sphere, re-centred each round.

    x(sigma) = c + L unit(u0 + E sigma), with E a tangent basis of the sphere
    at u0, so every iterate stays exactly on the surface.
    """
    u0 = obstacle.param_of(seed)
    L = obstacle.L
    for _ in range(rounds):
        E = TangentFrame.from_normal(u0, u0).basis

        def fun(sigma):
            w = u0 + E @ sigma
            nw = np.linalg.norm(w)
            u = w / nw
            x = obstacle.center + L @ u
            dp, dq = x - p, x - p_prime
            rp, rq = np.linalg.norm(dp), np.linalg.norm(dq)
            grad_x = dp / rp + dq / rq
            jac = L @ ((np.eye(3) - np.outer(u, u)) / nw) @ E
            return rp + rq, jac.T @ grad_x

        res = minimize(fun, np.zeros(2), jac=True, method="BFGS", options={"gtol": 1e-13})
        u0 = unit(u0 + E @ res.x)
    return obstacle.center + L @ u0


def refine_on_mesh(
    obstacle: MeshObstacle, faces: np.ndarray, p: np.ndarray, p_prime: np.ndarray
) -> np.ndarray:
    """Exact minimum of phi over the given mesh faces.

    phi is convex on every flat triangle, so SLSQP in barycentric coordinates
    finds each face minimum; the best face wins.
    """
    best_x, best_phi = None, np.inf
    constraints = [
        {"type": "ineq", "fun": lambda ab: ab[0], "jac": lambda ab: np.array([1.0, 0.0])},
        {"type": "ineq", "fun": lambda ab: ab[1], "jac": lambda ab: np.array([0.0, 1.0])},
        {
            "type": "ineq",
            "fun": lambda ab: 1.0 - ab[0] - ab[1],
            "jac": lambda ab: np.array([-1.0, -1.0]),
        },
    ]
    for face in faces:
        a, b, c = obstacle.mesh.triangles[face].astype(np.float64)
        edges = np.column_stack([b - a, c - a])

        def fun(ab):
            x = a + edges @ ab
            dp, dq = x - p, x - p_prime
            rp, rq = np.linalg.norm(dp), np.linalg.norm(dq)
            return rp + rq, edges.T @ (dp / rp + dq / rq)

        res = minimize(
            fun,
            np.array([1.0, 1.0]) / 3.0,
            jac=True,
            method="SLSQP",
            constraints=constraints,
            options={"ftol": 1e-14, "maxiter": 200},
        )
        if res.fun < best_phi:
            best_phi, best_x = float(res.fun), a + edges @ np.clip(res.x, 0.0, 1.0)
    return best_x


def min_broken_path(
    obstacle: ObstacleShape,
    p: np.ndarray,
    p_prime: np.ndarray,
    level: Optional[int] = None,
    cluster_tol: Optional[float] = None,
    max_clusters: int = MAX_CLUSTERS,
    seeds_per_cluster: int = 3,
    snell_tol: float = 1e-6,
) -> Tuple[float, ReflectorSet]:
    """Global minimum of phi(x; p, p') over the obstacle surface.

    Surface samples within 2 * spacing of the sampled minimum form a band;
    each connected piece of the band seeds a local refinement, and refined
    points within cluster_tol are merged.
    """
    p, p_prime = as_point(p), as_point(p_prime)
    check_configuration(obstacle, p, p_prime)
    cluster_tol = 1e-3 * obstacle.diameter if cluster_tol is None else cluster_tol

    points, _ = obstacle.surface_samples(level)
    spacing = obstacle.sample_spacing(level)
    phi = broken_path_length(points, p, p_prime)
    in_band = np.flatnonzero(phi <= phi.min() + 2.0 * spacing)
    n_comp, labels = link_components(points[in_band], 1.5 * spacing)
    logger.debug(f"{len(in_band)} band samples in {n_comp} component(s)")

    candidates, seed_minima = [], []
    for comp in range(n_comp):
        members = in_band[labels == comp]
        order = np.argsort(phi[members], kind="stable")
        core = members[phi[members] <= phi[members[order[0]]] + spacing**2 / obstacle.diameter]
        start = int(np.flatnonzero(core == members[order[0]])[0])
        seeds = [core[k] for k in farthest_point_seeds(points[core], start, seeds_per_cluster)]
        if isinstance(obstacle, MeshObstacle):
            candidates.append(refine_on_mesh(obstacle, obstacle.faces_around(points[members]), p, p_prime))
            local = [refine_on_mesh(obstacle, obstacle.faces_around(points[s]), p, p_prime) for s in seeds]
        else:
            local = [refine_on_quadric(obstacle, points[s], p, p_prime) for s in seeds]
            candidates.extend(local)
        seed_minima.append(np.array(local))

    candidates = np.array(candidates)
    cand_phi = broken_path_length(candidates, p, p_prime)
    c_min = float(min(cand_phi.min(), phi.min()))
    if c_min <= np.linalg.norm(p - p_prime):
        raise ShadowConfigurationError(
            f"min phi = {c_min} does not exceed |p - p'|: the obstacle touches [p, p']"
        )

    keep = cand_phi <= c_min + cluster_tol
    candidates, cand_phi = candidates[keep], cand_phi[keep]
    n_cand, cand_labels = link_components(candidates, cluster_tol)

    # seeds spread over one band piece that all reach c_min at distinct points
    # trace a continuum of minimisers
    band = False
    for local in seed_minima:
        at_min = local[broken_path_length(local, p, p_prime) <= c_min * (1.0 + BAND_RTOL)]
        band = band or link_components(at_min, cluster_tol)[0] >= 3
    n_clusters = n_cand
    degenerate = band or n_clusters > max_clusters

    reflection_points = []
    for comp in range(n_cand):
        idx = np.flatnonzero(cand_labels == comp)
        best = idx[np.argmin(cand_phi[idx])]
        q = candidates[best]
        normal = np.asarray(obstacle.normal_at(q)).reshape(3)
        residual = snell_residual(UnitPairGeometry.at(q, p, p_prime), normal)
        if residual > snell_tol:
            logger.warning(f"Snell residual {residual:.3e} at {q} exceeds {snell_tol:.1e}")
        reflection_points.append(ReflectionPoint(q, normal, float(cand_phi[best]), residual))
    reflection_points.sort(key=lambda pt: (round(pt.phi / cluster_tol), *np.round(pt.q, 9)))

    if degenerate:
        reason = "a continuum of minimisers" if band else f"{n_clusters} clusters over the cap of {max_clusters}"
        logger.warning(f"Degenerate first reflection: {reason}")
    reflectors = ReflectorSet(
        p=p,
        p_prime=p_prime,
        c_min=c_min,
        points=reflection_points,
        cluster_tolerance=cluster_tol,
        n_clusters=int(max(n_clusters, len(reflection_points))),
        degenerate=degenerate,
        sample_spacing=spacing,
        n_samples=len(points),
    )
    return c_min, reflectors


def first_reflector(
    obstacle: ObstacleShape,
    p: np.ndarray,
    p_prime: np.ndarray,
    tol: Optional[float] = None,
    **kwargs,
) -> ReflectorSet:
    _, reflectors = min_broken_path(obstacle, p, p_prime, cluster_tol=tol, **kwargs)
    return reflectors


def min_over_triple_surfaces(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    level: int = 5,
    n_ball: int = 100,
    refine: bool = True,
) -> float:
    """min over (x, y, y') in dD x dB x dB' of |y - x| + |x - y'|.

    The brute force runs on sampled surfaces; for fixed x the two ball terms
    decouple, so nearest-neighbour queries do the inner minimisation. The
    refinement then moves (x, y, y') jointly from the best sampled triple.
    """
    x, _ = obstacle.surface_samples(level)
    y = ball.surface_points(n_ball) if ball.radius > 0 else ball.center[None]
    y_prime = ball_prime.surface_points(n_ball) if ball_prime.radius > 0 else ball_prime.center[None]
    d, iy = cKDTree(y).query(x)
    d_prime, iy_prime = cKDTree(y_prime).query(x)
    total = d + d_prime
    best = int(np.argmin(total))
    brute = float(total[best])
    if not refine:
        return brute

    x0 = x[best]
    directions = [
        unit(y[iy[best]] - ball.center) if ball.radius > 0 else np.zeros(3),
        unit(y_prime[iy_prime[best]] - ball_prime.center) if ball_prime.radius > 0 else np.zeros(3),
    ]
    tf = TangentFrame.from_normal(x0, obstacle.normal_at(x0))
    frames = [TangentFrame.from_normal(np.zeros(3), v) if v.any() else None for v in directions]

    def on_ball(b: Ball, v0: np.ndarray, frame, t: np.ndarray) -> np.ndarray:
        if frame is None:
            return b.center
        return b.center + b.radius * unit(v0 + frame.basis @ t)

    def objective(z: np.ndarray) -> float:
        xs = obstacle.project(tf.embed(z[:2]))
        ys = on_ball(ball, directions[0], frames[0], z[2:4])
        ys_prime = on_ball(ball_prime, directions[1], frames[1], z[4:6])
        return float(np.linalg.norm(ys - xs) + np.linalg.norm(xs - ys_prime))

    res = minimize(objective, np.zeros(6), method="Powell", options={"xtol": 1e-10, "ftol": 1e-14})
    refined = float(min(res.fun, brute))
    logger.info(f"Triple-surface minimum: brute force {brute:.6f}, refined {refined:.6f}")
    return refined


def _shifted_min(obstacle, p, p_prime, level) -> float:
    c_min, _ = min_broken_path(obstacle, p, p_prime, level=level, seeds_per_cluster=1)
    return c_min


def t_thresholds(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    s: float = 0.0,
    omega_level: int = 2,
    level: int = 5,
    threads: int = 4,
) -> TThresholds:
    """Observation-time lower bounds for the decay-rate and scan extractions.

    first_arrival = min phi - (eta + eta'); scan = sup over an omega grid of
    min phi(.; p, p' + s omega) - (eta + eta' - s).
    """
    if not 0.0 <= s < max(ball_prime.radius, 1e-300):
        raise GeometryError(f"shift s={s} must satisfy 0 <= s < eta'={ball_prime.radius}")
    eta_sum = ball.radius + ball_prime.radius
    c_min, _ = min_broken_path(obstacle, ball.center, ball_prime.center, level=level)
    first_arrival = c_min - eta_sum
    if s == 0.0:
        return TThresholds(first_arrival, first_arrival, None)

    omegas, _ = unit_icosphere(omega_level)
    values = np.empty(len(omegas))
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {
            executor.submit(
                _shifted_min, obstacle, ball.center, ball_prime.center + s * omega, level
            ): i
            for i, omega in enumerate(omegas)
        }
        for future in concurrent.futures.as_completed(futures):
            values[futures[future]] = future.result()
    worst = int(np.argmax(values))
    scan = float(values[worst] - (eta_sum - s))
    return TThresholds(first_arrival, scan, omegas[worst])


def supports_half_space(
    obstacle: ObstacleShape, q: np.ndarray, nu: np.ndarray, level: int = 5, tol: float = 1e-9
) -> bool:
    """True when the whole obstacle lies in {x : (x - q).nu <= tol}."""
    points, _ = obstacle.surface_samples(level)
    heights = (points - as_point(q)) @ unit(as_point(nu))
    return bool(heights.max() <= tol * max(1.0, obstacle.diameter))
