import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import numpy as np

from src.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

Mode = Literal["fdtd", "semianalytic", "geometry"]
MODES = ("fdtd", "semianalytic", "geometry")


@dataclass
class ObstacleConfig:
    kind: Literal["sphere", "ellipsoid", "mesh"] = "sphere"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    semi_axes: Optional[Tuple[float, float, float]] = None
    euler_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mesh_path: Optional[str] = None

    @classmethod
    def unit_sphere(cls) -> "ObstacleConfig":
        return cls(kind="sphere", center=(0.0, 0.0, 0.0), radius=1.0)

    @classmethod
    def ellipsoid_211(cls) -> "ObstacleConfig":
        return cls(kind="ellipsoid", semi_axes=(2.0, 1.0, 1.0))

    def build(self):
        from src.data.obstacle import Ellipsoid, Sphere, load_mesh

        if self.kind == "sphere":
            return Sphere(self.center, self.radius)
        if self.kind == "ellipsoid":
            if self.semi_axes is None:
                raise ConfigurationError("ellipsoid obstacle needs semi_axes")
            return Ellipsoid.from_euler(self.center, self.semi_axes, self.euler_deg)
        if self.kind == "mesh":
            if self.mesh_path is None:
                raise ConfigurationError("mesh obstacle needs mesh_path")
            return load_mesh(self.mesh_path)
        raise ConfigurationError(f"unknown obstacle kind {self.kind!r}")


@dataclass
class BallConfig:
    center: Tuple[float, float, float]
    radius: float

    def build(self):
        from src.core.geometry import Ball

        return Ball(np.asarray(self.center, dtype=np.float64), self.radius)


@dataclass
class TauWindowConfig:
    tau_min: float = 4.0
    tau_max: float = 40.0
    count: int = 24
    # large-tau window of the semi-analytic joint fits
    high_min: float = 40.0
    high_max: float = 400.0
    high_count: int = 16

    def __post_init__(self):
        if not 0 < self.tau_min < self.tau_max:
            raise ConfigurationError(f"tau window needs 0 < tau_min < tau_max, got [{self.tau_min}, {self.tau_max}]")
        if self.count < 2:
            raise ConfigurationError(f"tau window needs at least two samples, got {self.count}")

    def grid(self) -> np.ndarray:
        return np.geomspace(self.tau_min, self.tau_max, self.count)

    def high_grid(self) -> np.ndarray:
        return np.geomspace(self.high_min, self.high_max, self.high_count)


@dataclass
class FDTDConfig:
    h: float = 0.05
    T: float = 8.0
    cfl: float = 0.5
    reference_run: bool = True
    trace_path: Optional[str] = None
    free_trace_path: Optional[str] = None


@dataclass
class ScanConfig:
    s: Optional[float] = None  # eta' / 2 when unset
    omega_level: int = 4
    delta_c: Optional[float] = None
    refine: bool = True


@dataclass
class CurvatureConfig:
    shifts: Tuple[float, float] = (0.05, 0.45)
    q: Optional[Tuple[float, float, float]] = None


@dataclass
class PrincipalConfig:
    n_theta: int = 12
    shifts: Tuple[float, float] = (0.05, 0.45)
    q: Optional[Tuple[float, float, float]] = None

    def thetas(self) -> np.ndarray:
        return np.linspace(0.0, np.pi, self.n_theta, endpoint=False)


@dataclass
class RunConfig:
    """Everything one invocation needs; JSON files map onto it field by field."""

    obstacle: ObstacleConfig
    ball: BallConfig
    ball_prime: BallConfig
    tau: TauWindowConfig = field(default_factory=TauWindowConfig)
    fdtd: FDTDConfig = field(default_factory=FDTDConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    curvature: CurvatureConfig = field(default_factory=CurvatureConfig)
    principal: PrincipalConfig = field(default_factory=PrincipalConfig)
    mode: Mode = "semianalytic"
    out_dir: str = "runs"
    seed: int = 0
    threads: int = 4
    name: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.name is None:
            self.name = f"{self.obstacle.kind}_{self.mode}"

    @classmethod
    def s1(cls) -> "RunConfig":
        """Unit sphere seen from p = (4, 0, 0), p' = (0, 4, 0), eta = eta' = 0.5."""
        return cls(
            obstacle=ObstacleConfig.unit_sphere(),
            ball=BallConfig((4.0, 0.0, 0.0), 0.5),
            ball_prime=BallConfig((0.0, 4.0, 0.0), 0.5),
            name="s1",
        )

    @classmethod
    def desk(cls) -> "RunConfig":
        """Small FDTD scene that runs in seconds."""
        return cls(
            obstacle=ObstacleConfig(kind="sphere", radius=0.5),
            ball=BallConfig((1.6, 0.0, 0.0), 0.3),
            ball_prime=BallConfig((0.0, 1.6, 0.0), 0.3),
            tau=TauWindowConfig(tau_min=2.0, tau_max=8.0, count=12),
            fdtd=FDTDConfig(h=0.1, T=4.0),
            scan=ScanConfig(omega_level=2),
            curvature=CurvatureConfig(shifts=(0.03, 0.27)),
            principal=PrincipalConfig(shifts=(0.03, 0.27)),
            mode="fdtd",
            name="desk",
        )

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {
            "obstacle": ObstacleConfig,
            "ball": BallConfig,
            "ball_prime": BallConfig,
            "tau": TauWindowConfig,
            "fdtd": FDTDConfig,
            "scan": ScanConfig,
            "curvature": CurvatureConfig,
            "principal": PrincipalConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**{k: _as_tuple(v) for k, v in value.items()})
                except (TypeError, AttributeError) as e:
                    raise ConfigurationError(f"invalid '{key}' section: {e}") from e
            else:
                kwargs[key] = value
        for required in ("obstacle", "ball", "ball_prime"):
            if required not in kwargs:
                raise ConfigurationError(f"config is missing the '{required}' section")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object, got {type(data).__name__}")
        data.setdefault("name", path.stem)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        """Check the standing hypotheses before any run: disjoint balls, the hull
        of B and B' away from the obstacle, and T beyond the first reflection
        time in FDTD mode."""
        from src.data.reflector import t_thresholds

        obstacle, ball, ball_prime = self.obstacle.build(), self.ball.build(), self.ball_prime.build()
        gap = np.linalg.norm(ball.center - ball_prime.center) - ball.radius - ball_prime.radius
        if gap <= 0:
            raise ConfigurationError(f"source and receiver balls overlap (gap {gap:.4g})")
        clearance = obstacle.hull_clearance(ball, ball_prime)
        if clearance <= 0:
            raise ConfigurationError(
                f"hull of B and B' meets the obstacle: clearance {clearance:.4g} <= 0"
            )
        if self.mode == "fdtd" and self.fdtd.trace_path is None:
            thresholds = t_thresholds(obstacle, ball, ball_prime, threads=self.threads)
            if self.fdtd.T <= thresholds.first_arrival:
                raise ConfigurationError(
                    f"observation time too short: T={self.fdtd.T} <= {thresholds.first_arrival:.4f} "
                    "(first reflection time)"
                )
        s = self.scan_shift()
        if not 0 < s < ball_prime.radius:
            raise ConfigurationError(f"scan shift s={s} must satisfy 0 < s < eta'={ball_prime.radius}")
        for section in ("curvature", "principal"):
            s1, s2 = getattr(self, section).shifts
            if not 0 < s1 < s2 < ball_prime.radius:
                raise ConfigurationError(
                    f"{section} shifts ({s1}, {s2}) must satisfy 0 < s1 < s2 < eta'={ball_prime.radius}"
                )
        logger.info(f"Config '{self.name}' valid: hull clearance {clearance:.4f}")
        return obstacle, ball, ball_prime

    def scan_shift(self) -> float:
        return 0.5 * self.ball_prime.radius if self.scan.s is None else self.scan.s

    def source(self, progress: bool = True):
        """The data source of the configured mode."""
        from src.data.trace import load_trace
        from src.models.probe import FDTDSource, GeometrySource, SemiAnalyticSource

        obstacle, ball, ball_prime = self.validate()
        if self.mode == "geometry":
            return GeometrySource(obstacle, ball, ball_prime)
        if self.mode == "semianalytic":
            return SemiAnalyticSource(obstacle, ball, ball_prime, self.tau.grid(), self.tau.high_grid())
        if self.fdtd.trace_path is not None:
            free = None if self.fdtd.free_trace_path is None else load_trace(self.fdtd.free_trace_path)
            return FDTDSource.from_traces(load_trace(self.fdtd.trace_path), ball, ball_prime, free, self.tau.grid())
        return FDTDSource(
            obstacle,
            ball,
            ball_prime,
            h=self.fdtd.h,
            T=self.fdtd.T,
            cfl=self.fdtd.cfl,
            taus=self.tau.grid(),
            reference=self.fdtd.reference_run,
            threads=self.threads,
            progress=progress,
        )


def _as_tuple(value):
    return tuple(value) if isinstance(value, list) else value
