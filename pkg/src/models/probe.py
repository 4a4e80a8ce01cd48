import concurrent.futures
import logging
from abc import ABC, abstractmethod
from collections import namedtuple
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from src.core.errors import (
    ConfigurationError,
    DegenerateDeterminantError,
    DegenerateReflectorError,
    GeometryError,
    IndicatorFitError,
)
from src.core.geometry import (
    CROSS_TOL,
    Ball,
    DeterminantVariant,
    ShapeOperator2,
    SpheroidFrame,
    TangentFrame,
    UnitPairGeometry,
    as_point,
    bistatic_deviation,
    det_shape_diff,
    resolve_determinant_variant,
    snell_normal,
    spheroid_point,
    unit,
)
from src.data.obstacle import ObstacleShape, unit_icosphere
from src.data.reflector import link_components, min_broken_path, supports_half_space, t_thresholds
from src.data.trace import ReceiverTrace
from src.models.indicator import (
    IndicatorCurve,
    cancellation_noise,
    decay_fit,
    default_tau_grid,
    fdtd_curve,
    joint_limit,
    noise_floor,
    scaled_limit,
    semianalytic_curve,
    usable_window,
)
from src.models.potentials import (
    AsymptoticKind,
    SurfaceQuadrature,
    build_sweep_quadrature,
    leading_coefficient,
)
from src.models.wavesim import (
    LaplaceField,
    SimulationConfig,
    accumulate_laplace,
    check_causality,
    energy_drift,
    simulate,
)

logger = logging.getLogger(__name__)

FirstReflection = namedtuple("FirstReflection", ["c", "kappa", "uncertainty", "curve", "diagnostics"])
ScanCluster = namedtuple("ScanCluster", ["omega", "q", "normal", "residual", "size"])

ILL_CONDITIONED = 1e10


class DataSource(ABC):
    """Where the decay rates and scaled limits of an indicator come from.

    Every reconstruction only talks to this interface, so it runs unchanged on
    exact geometry, on the semi-analytic 2J indicator and on simulated data.
    """

    mode: str = "abstract"
    # quadratic stencil sizes (rad) used to polish a scan hit
    refine_steps: Tuple[float, ...] = (0.05, 0.02)

    def __init__(self, ball: Ball, ball_prime: Ball):
        self.ball = ball
        self.ball_prime = ball_prime
        self._first: Optional[FirstReflection] = None

    @abstractmethod
    def _first_reflection(self) -> FirstReflection: ...

    @abstractmethod
    def shifted_minimum(self, sub_ball: Ball) -> Tuple[float, float]:
        """min phi(.; p, center of sub_ball) recovered from data, with an uncertainty."""

    @abstractmethod
    def scaled_limit_for(self, sub_ball: Ball, kappa: float) -> float:
        """lim tau^4 e^{tau kappa} I(tau) for the receiver sub_ball."""

    @abstractmethod
    def with_balls(self, ball: Ball, ball_prime: Ball) -> "DataSource": ...

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "p": self.ball.center.tolist(),
            "eta": self.ball.radius,
            "p_prime": self.ball_prime.center.tolist(),
            "eta_prime": self.ball_prime.radius,
        }

    def first_reflection_distance(self) -> FirstReflection:
        if self._first is None:
            self._first = self._first_reflection()
            logger.info(
                f"[{self.mode}] first reflection distance c = {self._first.c:.6f} "
                f"(kappa = {self._first.kappa:.6f} +- {self._first.uncertainty:.2e})"
            )
        return self._first

    def shifted_determinant(self, q: np.ndarray, s: float, c: float) -> float:
        """det(S_q(E_{c-s}(p, p' + s A')) - S_q(dD)) by inverting the scaled limit
        of the indicator for the sub-ball B_{eta' - s}(p' + s A')."""
        p, p_prime = self.ball.center, self.ball_prime.center
        geo = UnitPairGeometry.at(q, p, p_prime)
        sub = Ball(p_prime + s * geo.A_prime, self.ball_prime.radius - s)
        kappa = c - self.ball.radius - self.ball_prime.radius
        limit = self.scaled_limit_for(sub, kappa)
        if not limit > 0:
            raise DegenerateDeterminantError(f"scaled limit {limit:.4g} is not positive at s={s}")
        numerator = 0.5 * np.pi * (self.ball.radius / geo.r) * (sub.radius / (geo.r_prime - s))
        return float((numerator / limit) ** 2)


class GeometrySource(DataSource):
    """Exact answers computed from a known obstacle."""

    mode = "geometry"
    refine_steps = (1e-3, 1e-4)

    def __init__(self, obstacle: ObstacleShape, ball: Ball, ball_prime: Ball, level: Optional[int] = None,
                 scan_level: int = 5):
        super().__init__(ball, ball_prime)
        self.obstacle = obstacle
        self.level = level
        self.scan_level = scan_level

    def _first_reflection(self) -> FirstReflection:
        c_min, reflectors = min_broken_path(
            self.obstacle, self.ball.center, self.ball_prime.center, level=self.level
        )
        kappa = c_min - self.ball.radius - self.ball_prime.radius
        return FirstReflection(c_min, kappa, 0.0, None, {"reflectors": reflectors.to_dict()})

    def shifted_minimum(self, sub_ball: Ball) -> Tuple[float, float]:
        c_min, _ = min_broken_path(
            self.obstacle, self.ball.center, sub_ball.center, level=self.scan_level, seeds_per_cluster=1
        )
        return c_min, 0.0

    def scaled_limit_for(self, sub_ball: Ball, kappa: float) -> float:
        return leading_coefficient(self.obstacle, self.ball, sub_ball, kind=AsymptoticKind.BALL_PAIR)

    def shifted_determinant(self, q: np.ndarray, s: float, c: float) -> float:
        q = self.obstacle.project(as_point(q))
        frame = SpheroidFrame(self.ball.center, self.ball_prime.center, c)
        return det_shape_diff(q, self.obstacle, frame, s=s, eta_prime=self.ball_prime.radius)

    def with_balls(self, ball: Ball, ball_prime: Ball) -> "GeometrySource":
        return GeometrySource(self.obstacle, ball, ball_prime, self.level, self.scan_level)

    def describe(self) -> dict:
        return {**super().describe(), "obstacle": self.obstacle.to_dict()}


class SemiAnalyticSource(DataSource):
    """Indicator replaced by 2 J(tau), J evaluated on the obstacle boundary.

    Decay rates come from fits over the scan window; c and the scaled limits
    come from a joint fit over a large-tau window, where the 1 / tau
    corrections are small.
    """

    mode = "semianalytic"
    refine_steps = (0.02, 0.005)

    def __init__(
        self,
        obstacle: ObstacleShape,
        ball: Ball,
        ball_prime: Ball,
        taus: Optional[Sequence[float]] = None,
        high_taus: Optional[Sequence[float]] = None,
        rtol: float = 1e-4,
    ):
        super().__init__(ball, ball_prime)
        self.obstacle = obstacle
        self.taus = default_tau_grid() if taus is None else np.asarray(taus, dtype=np.float64)
        self.high_taus = np.geomspace(40.0, 400.0, 16) if high_taus is None else np.asarray(high_taus)
        self.rtol = rtol
        self._quadrature: Optional[SurfaceQuadrature] = None
        self._bias = 0.0

    def curve(self, sub_ball: Optional[Ball] = None, taus=None, quadrature=None) -> IndicatorCurve:
        return semianalytic_curve(
            self.obstacle,
            self.ball,
            self.ball_prime if sub_ball is None else sub_ball,
            self.taus if taus is None else taus,
            quadrature=quadrature,
            rtol=self.rtol,
            check=quadrature is None,
        )

    @property
    def quadrature(self) -> SurfaceQuadrature:
        if self._quadrature is None:
            # resolves every sub-ball focus inside B'
            self._quadrature = build_sweep_quadrature(
                self.obstacle,
                self.ball,
                self.ball_prime,
                float(self.taus.max()),
                hot_margin=2.0 * self.ball_prime.radius,
                rtol=self.rtol,
            )
        return self._quadrature

    def _first_reflection(self) -> FirstReflection:
        eta_sum = self.ball.radius + self.ball_prime.radius
        curve = self.curve()
        fit = decay_fit(curve)
        high = self.curve(taus=self.high_taus)
        joint = joint_limit(high)
        half = len(self.high_taus) // 2
        spread = [joint_limit(high.window(tau_max=high.taus[half + 2])).kappa,
                  joint_limit(high.window(tau_min=high.taus[half - 3])).kappa]
        uncertainty = float(max(abs(k - joint.kappa) for k in spread))
        c = joint.kappa + eta_sum
        # scan rates are window fits; calibrate them against the large-tau c
        swept = decay_fit(self.curve(quadrature=self.quadrature))
        self._bias = c - (swept.rate + eta_sum)
        return FirstReflection(
            c,
            joint.kappa,
            max(uncertainty, fit.uncertainty),
            curve,
            {
                "decay_fit": fit.to_dict(),
                "joint_fit": {
                    "kappa": joint.kappa,
                    "log_limit": joint.log_limit,
                    "residual": joint.residual,
                    "window": list(joint.taus),
                },
                "scan_calibration": self._bias,
            },
        )

    def shifted_minimum(self, sub_ball: Ball) -> Tuple[float, float]:
        self.first_reflection_distance()
        fit = decay_fit(self.curve(sub_ball, quadrature=self.quadrature))
        return fit.rate + self.ball.radius + sub_ball.radius + self._bias, fit.uncertainty

    def scaled_limit_for(self, sub_ball: Ball, kappa: float) -> float:
        joint = joint_limit(self.curve(sub_ball, taus=self.high_taus))
        if abs(joint.kappa - kappa) > 1e-3 * max(1.0, kappa):
            logger.warning(
                f"Large-tau decay {joint.kappa:.6f} of the sub-ball indicator differs from "
                f"kappa={kappa:.6f}"
            )
        return float(np.exp(joint.log_limit))

    def with_balls(self, ball: Ball, ball_prime: Ball) -> "SemiAnalyticSource":
        return SemiAnalyticSource(self.obstacle, ball, ball_prime, self.taus, self.high_taus, self.rtol)

    def describe(self) -> dict:
        return {
            **super().describe(),
            "obstacle": self.obstacle.to_dict(),
            "tau_window": [float(self.taus[0]), float(self.taus[-1]), len(self.taus)],
            "high_tau_window": [float(self.high_taus[0]), float(self.high_taus[-1]), len(self.high_taus)],
        }


class FDTDSource(DataSource):
    """Indicator from simulated receiver data, with a free-space reference run
    on the same grid subtracted unless disabled."""

    mode = "fdtd"
    refine_steps = (0.05, 0.02)

    def __init__(
        self,
        obstacle: Optional[ObstacleShape],
        ball: Ball,
        ball_prime: Ball,
        h: float = 0.05,
        T: float = 8.0,
        cfl: float = 0.5,
        taus: Optional[Sequence[float]] = None,
        reference: bool = True,
        threads: Optional[int] = None,
        progress: bool = True,
    ):
        super().__init__(ball, ball_prime)
        self.obstacle = obstacle
        self.h, self.T, self.cfl = h, T, cfl
        self.taus = default_tau_grid() if taus is None else np.asarray(taus, dtype=np.float64)
        self.reference = reference
        self.threads = threads
        self.progress = progress
        self.traces: Optional[Tuple[ReceiverTrace, Optional[ReceiverTrace]]] = None
        self._fields: Optional[Tuple[LaplaceField, Optional[LaplaceField]]] = None

    @classmethod
    def from_traces(
        cls,
        trace: ReceiverTrace,
        ball: Ball,
        ball_prime: Ball,
        free_trace: Optional[ReceiverTrace] = None,
        taus: Optional[Sequence[float]] = None,
    ) -> "FDTDSource":
        source = cls(None, ball, ball_prime, h=trace.h, T=trace.T, taus=taus, reference=free_trace is not None)
        for t in (trace, free_trace):
            if t is not None:
                energy_drift(t)
        source.traces = (trace, free_trace)
        source._fields = (
            accumulate_laplace(trace, source.taus),
            None if free_trace is None else accumulate_laplace(free_trace, source.taus),
        )
        return source

    def config(self) -> SimulationConfig:
        return SimulationConfig(
            ball=self.ball,
            ball_prime=self.ball_prime,
            obstacle=self.obstacle,
            h=self.h,
            T=self.T,
            cfl=self.cfl,
            threads=self.threads,
        )

    def run(self):
        if self._fields is not None:
            return
        if self.obstacle is None:
            raise ConfigurationError("FDTD mode needs an obstacle or recorded traces")
        thresholds = t_thresholds(self.obstacle, self.ball, self.ball_prime)
        if self.T <= thresholds.first_arrival:
            raise ConfigurationError(
                f"observation time too short: T={self.T} <= {thresholds.first_arrival:.4f} (first reflection time)"
            )
        config = self.config()
        trace, field = simulate(config, self.taus, record=True, progress=self.progress)
        free_trace, free_field = None, None
        if self.reference:
            free_trace, free_field = simulate(
                config.with_obstacle(None), self.taus, record=True, progress=self.progress
            )
        for t in (trace, free_trace):
            if t is not None:
                check_causality(t, self.ball)
                energy_drift(t)
        self.traces = (trace, free_trace)
        self._fields = (field, free_field)

    @property
    def fields(self) -> Tuple[LaplaceField, Optional[LaplaceField]]:
        self.run()
        return self._fields

    def curve(self, sub_ball: Optional[Ball] = None) -> IndicatorCurve:
        obstacle_field, free_field = self.fields
        weights = None if sub_ball is None else obstacle_field.restrict(sub_ball)
        return fdtd_curve(
            obstacle_field,
            self.ball,
            self.ball_prime if sub_ball is None else sub_ball,
            reference=free_field,
            weights=weights,
            obstacle=self.obstacle,
        )

    def fit_window(self, sub_ball: Optional[Ball] = None) -> IndicatorCurve:
        """Usable part of the curve, capped where the reference subtraction
        leaves only round-off."""
        window = usable_window(self.curve(sub_ball))
        obstacle_field, free_field = self.fields
        if free_field is None or len(window) == 0:
            return window
        weights = None if sub_ball is None else obstacle_field.restrict(sub_ball)
        noise = cancellation_noise(obstacle_field, free_field, weights).window(window.taus[0], window.taus[-1])
        return window.window(tau_max=noise_floor(window, noise))

    def _first_reflection(self) -> FirstReflection:
        curve = self.curve()
        fit = decay_fit(self.fit_window())
        c = fit.rate + self.ball.radius + self.ball_prime.radius
        return FirstReflection(c, fit.rate, fit.uncertainty, curve, {"decay_fit": fit.to_dict()})

    def shifted_minimum(self, sub_ball: Ball) -> Tuple[float, float]:
        fit = decay_fit(self.fit_window(sub_ball))
        return fit.rate + self.ball.radius + sub_ball.radius, fit.uncertainty

    def scaled_limit_for(self, sub_ball: Ball, kappa: float) -> float:
        return scaled_limit(self.fit_window(sub_ball), kappa).limit

    def with_balls(self, ball: Ball, ball_prime: Ball) -> "FDTDSource":
        return FDTDSource(
            self.obstacle, ball, ball_prime, self.h, self.T, self.cfl, self.taus,
            self.reference, self.threads, self.progress,
        )

    def describe(self) -> dict:
        return {
            **super().describe(),
            "obstacle": None if self.obstacle is None else self.obstacle.to_dict(),
            "h": self.h,
            "T": self.T,
            "cfl": self.cfl,
            "reference_run": self.reference,
            "tau_window": [float(self.taus[0]), float(self.taus[-1]), len(self.taus)],
        }


def extract_normal(q: np.ndarray, p: np.ndarray, p_prime: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """nu_q = -(A + A') / sqrt(2(1 + A.A')) from the reflection law."""
    return snell_normal(UnitPairGeometry.at(q, p, p_prime), tol)


@dataclass
class ScanResult:
    omegas: np.ndarray
    values: np.ndarray
    uncertainties: np.ndarray
    hits: np.ndarray
    points: np.ndarray
    c: float
    s: float
    delta_c: float
    clusters: List[ScanCluster] = field(default_factory=list)
    surface_distance: Optional[np.ndarray] = None
    mode: str = ""

    @property
    def failed(self) -> np.ndarray:
        """Directions whose shifted indicator gave no usable decay."""
        return np.isnan(self.values)

    @property
    def residuals(self) -> np.ndarray:
        return self.values - (self.c - self.s)

    @property
    def hit_points(self) -> np.ndarray:
        return self.points[self.hits]

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "c": float(self.c),
            "s": float(self.s),
            "delta_c": float(self.delta_c),
            "n_directions": int(len(self.omegas)),
            "n_hits": int(self.hits.sum()),
            "n_failed": int(self.failed.sum()),
            "failed_omegas": self.omegas[self.failed].tolist(),
            "hit_omegas": self.omegas[self.hits].tolist(),
            "hit_points": self.hit_points.tolist(),
            "hit_residuals": self.residuals[self.hits].tolist(),
            "clusters": [
                {
                    "omega": cl.omega.tolist(),
                    "q": cl.q.tolist(),
                    "normal": cl.normal.tolist(),
                    "residual": float(cl.residual),
                    "size": int(cl.size),
                }
                for cl in self.clusters
            ],
        }
        if self.surface_distance is not None:
            out["max_surface_distance"] = float(self.surface_distance.max(initial=0.0))
        return out


def omega_grid(level: int = 4) -> Tuple[np.ndarray, float]:
    """Icosphere directions and the longest edge between neighbours."""
    vertices, faces = unit_icosphere(level)
    edges = np.concatenate([vertices[faces[:, i]] - vertices[faces[:, (i + 1) % 3]] for i in range(3)])
    return vertices, float(np.linalg.norm(edges, axis=1).max())


def _check_shift(source: DataSource, s: float):
    if not 0.0 < s < source.ball_prime.radius:
        raise GeometryError(f"shift s={s} must satisfy 0 < s < eta'={source.ball_prime.radius}")


def refine_hit(
    source: DataSource, s: float, omega0: np.ndarray, steps: Optional[Sequence[float]] = None
) -> Tuple[np.ndarray, float]:
    """Direction minimising the shifted first reflection distance near omega0.

    Nelder-Mead gets close; quadratic fits on shrinking stencils then place
    the minimum below the data noise.
    """
    steps = source.refine_steps if steps is None else tuple(steps)
    omega0 = unit(as_point(omega0))
    tf = TangentFrame.from_normal(np.zeros(3), omega0)

    def direction(sigma: np.ndarray) -> np.ndarray:
        return unit(omega0 + tf.basis @ sigma)

    def g(sigma: np.ndarray) -> float:
        value, _ = source.shifted_minimum(source.ball_prime.shifted(s, direction(sigma)))
        return value

    simplex = np.array([[0.0, 0.0], [4.0 * steps[0], 0.0], [0.0, 4.0 * steps[0]]])
    res = minimize(
        g,
        np.zeros(2),
        method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": 0.5 * steps[0], "fatol": 1e-14, "maxiter": 200},
    )
    center, best = res.x, float(res.fun)
    stencil = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]], float)
    for h in steps:
        pts = center + h * stencil
        vals = np.array([g(x) for x in pts])
        d = pts - center
        design = np.column_stack(
            [np.ones(len(d)), d[:, 0], d[:, 1], 0.5 * d[:, 0] ** 2, d[:, 0] * d[:, 1], 0.5 * d[:, 1] ** 2]
        )
        a, b1, b2, h11, h12, h22 = np.linalg.lstsq(design, vals, rcond=None)[0]
        hess = np.array([[h11, h12], [h12, h22]])
        if np.all(np.linalg.eigvalsh(hess) > 0):
            step = -np.linalg.solve(hess, [b1, b2])
            if np.linalg.norm(step) > 2.0 * h:
                step *= 2.0 * h / np.linalg.norm(step)
            candidate = center + step
            value = g(candidate)
            if value <= min(best, vals.min()):
                center, best = candidate, value
                continue
        k = int(np.argmin(vals))
        if vals[k] < best:
            center, best = pts[k], float(vals[k])
    return direction(center), best


def scan_reflector(
    source: DataSource,
    s: float,
    omegas: Optional[np.ndarray] = None,
    omega_level: int = 4,
    delta_c: Optional[float] = None,
    c: Optional[float] = None,
    refine: bool = True,
    threads: int = 4,
    obstacle: Optional[ObstacleShape] = None,
    progress: bool = True,
) -> ScanResult:
    """Classify receiver sub-balls B_{eta' - s}(p' + s omega) as hit or miss.

    A direction is a hit when the shifted first reflection distance equals
    c - s within delta_c; hits map to q = p' + s(omega; p, p', c) omega on E_c.
    """
    _check_shift(source, s)
    first = source.first_reflection_distance()
    c = first.c if c is None else float(c)
    if delta_c is None:
        delta_c = max(2.0 * first.uncertainty, 1e-2 * c)
    if omegas is None:
        omegas, spacing = omega_grid(omega_level)
    else:
        omegas = np.stack([unit(w) for w in np.atleast_2d(omegas)])
        spacing = np.inf

    sub_balls = [source.ball_prime.shifted(s, w) for w in omegas]
    values = np.full(len(omegas), np.nan)
    uncertainties = np.full(len(omegas), np.nan)
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(source.shifted_minimum, b): i for i, b in enumerate(sub_balls)}
        for future in tqdm(
            concurrent.futures.as_completed(futures), total=len(futures), disable=not progress, desc="omega scan"
        ):
            i = futures[future]
            try:
                values[i], uncertainties[i] = future.result()
            except IndicatorFitError as e:
                logger.debug(f"omega {omegas[i]}: no usable decay ({e})")

    n_failed = int(np.isnan(values).sum())
    if n_failed == len(omegas):
        raise IndicatorFitError(f"no usable decay in any of the {len(omegas)} scan directions")
    if n_failed:
        logger.warning(f"[{source.mode}] {n_failed} of {len(omegas)} scan directions gave no usable decay")

    hits = np.abs(values - (c - s)) <= delta_c
    frame = SpheroidFrame(source.ball.center, source.ball_prime.center, c)
    points = spheroid_point(omegas, frame)
    logger.info(f"[{source.mode}] scan s={s}: {int(hits.sum())} hit(s) of {len(omegas)} (delta_c={delta_c:.3g})")

    clusters = []
    hit_idx = np.flatnonzero(hits)
    n_clusters, labels = link_components(omegas[hit_idx], 1.5 * spacing if np.isfinite(spacing) else 1e-12)
    for k in range(n_clusters):
        members = hit_idx[labels == k]
        best = members[np.argmin(np.abs(values[members] - (c - s)))]
        omega, value = omegas[best], values[best]
        if refine:
            omega, value = refine_hit(source, s, omega)
        q = spheroid_point(omega, frame)
        normal = extract_normal(q, source.ball.center, source.ball_prime.center)
        clusters.append(ScanCluster(omega, q, normal, float(value - (c - s)), len(members)))
    clusters.sort(key=lambda cl: -cl.size)

    surface_distance = None
    if obstacle is not None and len(hit_idx):
        surface_distance = np.array([np.linalg.norm(obstacle.project(x) - x) for x in points[hit_idx]])
    return ScanResult(
        omegas=omegas,
        values=values,
        uncertainties=uncertainties,
        hits=hits,
        points=points,
        c=c,
        s=s,
        delta_c=float(delta_c),
        clusters=clusters,
        surface_distance=surface_distance,
        mode=source.mode,
    )


@dataclass
class CurvatureReport:
    q: np.ndarray
    normal: np.ndarray
    gauss: float
    h_combination: float
    shifts: Tuple[float, float]
    determinants: Tuple[float, float]
    condition_number: float
    variant: DeterminantVariant
    mean: Optional[float] = None
    bistatic_deviation: Optional[float] = None
    supported: Optional[bool] = None
    mode: str = ""

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "q": self.q.tolist(),
            "normal": self.normal.tolist(),
            "gauss": float(self.gauss),
            "h_combination": float(self.h_combination),
            "mean": None if self.mean is None else float(self.mean),
            "shifts": [float(s) for s in self.shifts],
            "determinants": [float(d) for d in self.determinants],
            "condition_number": float(self.condition_number),
            "variant": DeterminantVariant(self.variant).value,
            "bistatic_deviation": None if self.bistatic_deviation is None else float(self.bistatic_deviation),
            "supported": self.supported,
        }


def curvature_extract(
    source: DataSource,
    q: np.ndarray,
    s1: float,
    s2: float,
    c: Optional[float] = None,
    variant: Optional[DeterminantVariant] = None,
) -> CurvatureReport:
    """Gauss curvature and the mean-curvature combination at a reflector from two
    shifted receiver balls.

    Each shift gives det_i = lambda_i^2 / 4 - sqrt(2 / (1 + A.A')) lambda_i X + K
    with lambda_i = 1 / |q - p| + 1 / (|q - p'| - s_i); two shifts fix (X, K).
    """
    q = as_point(q)
    p, p_prime = source.ball.center, source.ball_prime.center
    geo = UnitPairGeometry.at(q, p, p_prime)
    c = float(geo.r + geo.r_prime) if c is None else float(c)
    limit = min(source.ball_prime.radius, 0.5 * (c - geo.focal_distance))
    if not 0.0 < s1 < s2 < limit:
        raise ConfigurationError(f"shifts must satisfy 0 < s1 < s2 < {limit:.6g}, got s1={s1}, s2={s2}")
    normal = extract_normal(q, p, p_prime)
    variant = resolve_determinant_variant().variant if variant is None else DeterminantVariant(variant)

    dets = tuple(source.shifted_determinant(q, s, c) for s in (s1, s2))
    for s, det in zip((s1, s2), dets):
        if det <= 0:
            raise DegenerateDeterminantError(
                f"det(S_E - S_D) = {det:.6g} <= 0 at shift s={s}: the obstacle is not less "
                "curved than the enclosing spheroid"
            )
    lams = np.array([1.0 / geo.r + 1.0 / (geo.r_prime - s) for s in (s1, s2)])
    system = np.column_stack([-np.sqrt(2.0 / geo.gap) * lams, np.ones(2)])
    cond = float(np.linalg.cond(system))
    if cond > ILL_CONDITIONED:
        raise ConfigurationError(f"shifts s1={s1}, s2={s2} give an ill-conditioned system (cond {cond:.3e})")
    h_combination, gauss = np.linalg.solve(system, np.asarray(dets) - lams**2 / 4.0)

    mean = float(h_combination) if np.linalg.norm(geo.cross) < CROSS_TOL else None
    deviation = None
    if isinstance(source, GeometrySource):
        S_D = source.obstacle.shape_operator_at(source.obstacle.project(q)).operator
        deviation = bistatic_deviation(geo, S_D, variant)
    supported = None
    obstacle = getattr(source, "obstacle", None)
    if obstacle is not None:
        supported = supports_half_space(obstacle, obstacle.project(q), normal)
        if not supported:
            logger.warning(
                f"[{source.mode}] obstacle leaves the tangent half-space at {np.round(q, 6)}, "
                "the curvature read-out assumes it does not"
            )
    logger.info(
        f"[{source.mode}] curvature at {np.round(q, 6)}: K = {gauss:.6f}, "
        f"H-combination = {h_combination:.6f} (cond {cond:.1f})"
    )
    return CurvatureReport(
        q=q,
        normal=normal,
        gauss=float(gauss),
        h_combination=float(h_combination),
        shifts=(float(s1), float(s2)),
        determinants=(float(dets[0]), float(dets[1])),
        condition_number=cond,
        variant=variant,
        mean=mean,
        bistatic_deviation=deviation,
        supported=supported,
        mode=source.mode,
    )


@dataclass
class BallReconstruction:
    center: np.ndarray
    radius: float
    q: np.ndarray
    normal: np.ndarray
    c: float
    curvature: CurvatureReport
    scan: ScanResult
    mode: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "center": self.center.tolist(),
            "radius": float(self.radius),
            "q": self.q.tolist(),
            "normal": self.normal.tolist(),
            "c": float(self.c),
            "curvature": self.curvature.to_dict(),
            "scan": self.scan.to_dict(),
        }


def reconstruct_ball(
    source: DataSource,
    s: Optional[float] = None,
    shifts: Tuple[float, float] = (0.05, 0.45),
    omega_level: int = 4,
    threads: int = 4,
    progress: bool = True,
) -> BallReconstruction:
    """c from the decay rate, the unique reflector from the scan, K from the
    shifted system; radius 1 / sqrt K and center q - nu / sqrt K."""
    first = source.first_reflection_distance()
    s = 0.5 * source.ball_prime.radius if s is None else s
    scan = scan_reflector(source, s, omega_level=omega_level, threads=threads, progress=progress)
    if len(scan.clusters) != 1:
        raise DegenerateReflectorError(
            f"ball reconstruction needs exactly one reflector cluster, the scan found {len(scan.clusters)}"
        )
    cluster = scan.clusters[0]
    report = curvature_extract(source, cluster.q, *shifts, c=first.c)
    if report.gauss <= 0:
        raise GeometryError(f"extracted Gauss curvature {report.gauss:.4g} is not that of a ball")
    radius = 1.0 / np.sqrt(report.gauss)
    center = cluster.q - radius * cluster.normal
    logger.info(f"[{source.mode}] ball: center {np.round(center, 6)}, radius {radius:.6f}")
    return BallReconstruction(center, float(radius), cluster.q, cluster.normal, first.c, report, scan, source.mode)


@dataclass
class PrincipalDirections:
    thetas: np.ndarray
    h_combinations: np.ndarray
    directions: np.ndarray
    curvatures: Tuple[float, float]
    mean: float
    gauss: float
    operator: ShapeOperator2
    isotropic: bool
    residual: float

    def to_dict(self) -> dict:
        return {
            "theta": self.thetas.tolist(),
            "h_combination": self.h_combinations.tolist(),
            "directions": self.directions.tolist(),
            "curvatures": [float(k) for k in self.curvatures],
            "mean": float(self.mean),
            "gauss": float(self.gauss),
            "operator": self.operator.to_3d().tolist(),
            "isotropic": bool(self.isotropic),
            "residual": float(self.residual),
        }


def rotate_about_normal(x: np.ndarray, q: np.ndarray, normal: np.ndarray, theta: float) -> np.ndarray:
    return q + Rotation.from_rotvec(theta * unit(normal)).apply(as_point(x) - q)


def principal_directions(
    source: DataSource,
    q: np.ndarray,
    thetas: Optional[Sequence[float]] = None,
    shifts: Tuple[float, float] = (0.05, 0.45),
    c: Optional[float] = None,
    threads: int = 4,
    isotropic_tol: float = 1e-6,
    progress: bool = True,
) -> PrincipalDirections:
    """Rotate p, p' about the normal line at q and read the principal frame off
    the H-combination, which varies as a0 + a1 cos 2 theta + b1 sin 2 theta.

    The mean a0 gives H; the amplitude splits k1 and k2; the phase gives the
    direction of A x A' that carries k1.
    """
    q = as_point(q)
    p, p_prime = source.ball.center, source.ball_prime.center
    geo = UnitPairGeometry.at(q, p, p_prime)
    if np.linalg.norm(geo.cross) < CROSS_TOL:
        raise GeometryError("A x A' = 0: a monostatic-like pair has no rotation leverage")
    normal = extract_normal(q, p, p_prime)
    thetas = np.linspace(0.0, np.pi, 12, endpoint=False) if thetas is None else np.asarray(thetas, float)
    if len(thetas) < 3:
        raise ConfigurationError("rotation scan needs at least three angles")
    variant = resolve_determinant_variant().variant

    def extract(theta: float) -> CurvatureReport:
        rotated = source.with_balls(
            Ball(rotate_about_normal(p, q, normal, theta), source.ball.radius),
            Ball(rotate_about_normal(p_prime, q, normal, theta), source.ball_prime.radius),
        )
        return curvature_extract(rotated, q, *shifts, c=c, variant=variant)

    reports: List[Optional[CurvatureReport]] = [None] * len(thetas)
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(extract, t): i for i, t in enumerate(thetas)}
        for future in tqdm(
            concurrent.futures.as_completed(futures), total=len(futures), disable=not progress, desc="theta scan"
        ):
            reports[futures[future]] = future.result()

    values = np.array([r.h_combination for r in reports])
    design = np.column_stack([np.ones_like(thetas), np.cos(2.0 * thetas), np.sin(2.0 * thetas)])
    (a0, a1, b1), *_ = np.linalg.lstsq(design, values, rcond=None)
    residual = float(np.sqrt(np.mean((design @ np.array([a0, a1, b1]) - values) ** 2)))

    w2 = float(geo.cross @ geo.cross)
    beta = variant.kappa * w2 / geo.gap
    mean = a0 / (1.0 - beta)
    amplitude = float(np.hypot(a1, b1))
    gauss = float(np.mean([r.gauss for r in reports]))
    isotropic = amplitude <= isotropic_tol * max(1.0, abs(a0))

    t0 = unit(geo.cross)
    theta1 = 0.0 if isotropic else 0.5 * np.arctan2(-b1, -a1)
    v1 = rotate_about_normal(q + t0, q, normal, theta1) - q
    v2 = np.cross(normal, v1)
    split = 0.0 if isotropic else amplitude / beta
    k1, k2 = mean + split, mean - split
    frame = TangentFrame(q, v1, v2, normal)
    operator = ShapeOperator2(np.diag([k1, k2]), frame)
    if isotropic:
        logger.info("H-combination is constant in theta: umbilic point, principal directions are arbitrary")
    else:
        logger.info(f"Principal curvatures {k1:.6f}, {k2:.6f}; K check {k1 * k2:.6f} vs {gauss:.6f}")
    return PrincipalDirections(
        thetas=thetas,
        h_combinations=values,
        directions=np.stack([v1, v2]),
        curvatures=(float(k1), float(k2)),
        mean=float(mean),
        gauss=gauss,
        operator=operator,
        isotropic=bool(isotropic),
        residual=residual,
    )


def dichotomy_agreement(
    obstacle: ObstacleShape,
    ball: Ball,
    ball_prime: Ball,
    s: float,
    n_directions: int = 100,
    seed: int = 0,
    tol: float = 1e-8,
) -> float:
    """Fraction of directions where min phi(.; p, p' + s omega) = c - s exactly
    when p' + s(omega) omega lies on the obstacle.

    A quarter of the directions point at the first reflector, the rest are
    uniform on the sphere.
    """
    rng = np.random.default_rng(seed)
    c, reflectors = min_broken_path(obstacle, ball.center, ball_prime.center)
    star = unit(reflectors.points[0].q - ball_prime.center)
    omegas = rng.normal(size=(n_directions, 3))
    omegas[: n_directions // 4] = star
    omegas = np.stack([unit(w) for w in omegas])
    frame = SpheroidFrame(ball.center, ball_prime.center, c)
    scale = max(1.0, c)
    agree = 0
    for omega in omegas:
        value, _ = min_broken_path(obstacle, ball.center, ball_prime.center + s * omega, level=5)
        equal = abs(value - (c - s)) <= tol * scale
        x = spheroid_point(omega, frame)
        on_surface = np.linalg.norm(obstacle.project(x) - x) <= np.sqrt(tol) * scale
        agree += int(equal == on_surface)
    return agree / n_directions
