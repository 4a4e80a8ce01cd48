import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from src.core.errors import ConfigurationError, SimulationError
from src.core.geometry import Ball, as_point
from src.data.obstacle import ObstacleShape
from src.data.trace import ReceiverTrace

logger = logging.getLogger(__name__)

CFL_LIMIT = 1.0 / np.sqrt(3.0)
ENERGY_GROWTH_LIMIT = 1e3
ENERGY_DRIFT_TOL = 1e-6
CAUSALITY_MARGIN_CELLS = 3.0
CAUSALITY_FLOOR = 1e-3

SimulationGrid = namedtuple("SimulationGrid", ["origin", "n", "h"])
CausalityReport = namedtuple("CausalityReport", ["max_ratio", "peak", "ok"])


def causal_half_width(
    ball: Ball, ball_prime: Ball, T: float, origin: np.ndarray, h: float
) -> float:
    """Smallest box half-width such that no wave leaving B can hit the box and
    come back to B' before T."""
    o = as_point(origin)
    reach = np.linalg.norm(ball.center - o) + ball.radius
    reach_prime = np.linalg.norm(ball_prime.center - o) + ball_prime.radius
    return 0.5 * (T + reach + reach_prime) + 2.0 * h


@dataclass
class SimulationConfig:
    ball: Ball
    ball_prime: Ball
    obstacle: Optional[ObstacleShape] = None
    h: float = 0.05
    T: float = 8.0
    cfl: float = 0.5
    half_width: Optional[float] = None
    energy_every: int = 10
    threads: Optional[int] = None

    def __post_init__(self):
        if self.h <= 0 or self.T <= 0:
            raise ConfigurationError(f"grid step h={self.h} and final time T={self.T} must be positive")
        if not 0 < self.cfl <= CFL_LIMIT:
            raise ConfigurationError(
                f"CFL factor {self.cfl} violates the 3D stability bound 1/sqrt(3) = {CFL_LIMIT:.6f}"
            )
        if self.obstacle is not None:
            clearance = self.obstacle.hull_clearance(self.ball, self.ball_prime)
            if clearance <= 0:
                raise ConfigurationError(
                    f"source/receiver balls and their hull meet the obstacle (clearance {clearance:.4g})"
                )
        required = causal_half_width(self.ball, self.ball_prime, self.T, self.origin, self.h)
        if self.half_width is None:
            self.half_width = required
        elif self.half_width < required:
            raise ConfigurationError(
                f"insufficient causal margin: box half-width {self.half_width} < {required:.4f} "
                f"needed for T={self.T}"
            )

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.T / (self.cfl * self.h)))

    @property
    def origin(self) -> np.ndarray:
        """Box center, the midpoint of the ball centers snapped to the grid."""
        mid = 0.5 * (self.ball.center + self.ball_prime.center)
        return self.h * np.round(mid / self.h)

    def grid(self) -> SimulationGrid:
        n = int(np.ceil(self.half_width / self.h))
        return SimulationGrid(self.origin, n, self.h)

    def with_obstacle(self, obstacle: Optional[ObstacleShape]) -> "SimulationConfig":
        return SimulationConfig(
            ball=self.ball,
            ball_prime=self.ball_prime,
            obstacle=obstacle,
            h=self.h,
            T=self.T,
            cfl=self.cfl,
            half_width=self.half_width,
            energy_every=self.energy_every,
            threads=self.threads,
        )

    def to_dict(self) -> dict:
        return {
            "ball": {"center": self.ball.center.tolist(), "radius": self.ball.radius},
            "ball_prime": {"center": self.ball_prime.center.tolist(), "radius": self.ball_prime.radius},
            "obstacle": None if self.obstacle is None else self.obstacle.to_dict(),
            "h": self.h,
            "T": self.T,
            "cfl": self.cfl,
            "half_width": self.half_width,
        }


@dataclass
class LaplaceField:
    """w(x_i, tau) = int_0^T e^{-tau t} u(x_i, t) dt on the receiver nodes."""

    taus: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    h: float

    def integral(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """sum_i weights_i w(x_i, tau) for every tau."""
        weights = self.weights if weights is None else weights
        assert len(weights) == self.values.shape[1], (
            f"{len(weights)} weights for {self.values.shape[1]} quadrature nodes"
        )
        return self.values @ weights

    def restrict(self, ball: Ball) -> np.ndarray:
        """Weights of chi over a sub-ball on the same lattice nodes."""
        return ball.lattice_weights(self.nodes, self.h)


def trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def accumulate_laplace(trace: ReceiverTrace, taus: Sequence[float]) -> LaplaceField:
    """Composite trapezoid rule sum_n w_n e^{-tau t_n} u(x_i, t_n)."""
    taus = np.asarray(taus, dtype=np.float64)
    assert np.all(taus > 0), "tau grid must be positive"
    kernel = np.exp(-np.outer(taus, trace.times)) * trapezoid_weights(trace.n_steps, trace.dt)
    return LaplaceField(taus, trace.nodes, trace.weights, kernel @ trace.samples.T, trace.h)


class LaplaceAccumulator:
    """Running trapezoid sums, so a run need not keep the whole trace."""

    def __init__(self, taus: Sequence[float], n_nodes: int, n_steps: int, dt: float):
        self.taus = np.asarray(taus, dtype=np.float64)
        self.values = np.zeros((len(self.taus), n_nodes))
        self.weights = trapezoid_weights(n_steps, dt)
        self.dt = dt

    def add(self, n: int, u: np.ndarray):
        self.values += (self.weights[n] * np.exp(-self.taus * n * self.dt))[:, None] * u[None]


def free_space_solution(x: np.ndarray, t, ball: Ball) -> np.ndarray:
    """Exact u for u_tt = Delta u, u(0) = 0, u_t(0) = chi_B in free space.

    u = t |S(x, t) cap B| / (4 pi t^2): the cap formula gives
    (eta^2 - (r - t)^2) / (4 r) while the sphere cuts dB, and t while it lies in B.
    """
    r = np.linalg.norm(np.asarray(x, dtype=np.float64) - ball.center, axis=-1)
    t = np.asarray(t, dtype=np.float64)
    eta = ball.radius
    r_safe = np.where(r > 0, r, 1.0)
    inside = r + t <= eta
    crossing = np.abs(r - t) < eta
    cap = (eta**2 - (r - t) ** 2) / (4.0 * r_safe)
    return np.where(inside, t, np.where(crossing, cap, 0.0))


def _laplacian(u: torch.Tensor, out: torch.Tensor, inv_h2: float):
    out.zero_()
    c = out[1:-1, 1:-1, 1:-1]
    c.add_(u[2:, 1:-1, 1:-1]).add_(u[:-2, 1:-1, 1:-1])
    c.add_(u[1:-1, 2:, 1:-1]).add_(u[1:-1, :-2, 1:-1])
    c.add_(u[1:-1, 1:-1, 2:]).add_(u[1:-1, 1:-1, :-2])
    c.add_(u[1:-1, 1:-1, 1:-1], alpha=-6.0)
    c.mul_(inv_h2)


def _grid_indices(points: np.ndarray, grid: SimulationGrid) -> np.ndarray:
    idx = np.rint((points - grid.origin) / grid.h).astype(np.int64) + grid.n
    assert np.all((idx > 0) & (idx < 2 * grid.n)), "quadrature nodes leave the grid interior"
    return idx


def _obstacle_mask(obstacle: ObstacleShape, grid: SimulationGrid) -> torch.Tensor:
    size = 2 * grid.n + 1
    mask = torch.zeros((size, size, size), dtype=torch.bool)
    lo, hi = obstacle.bounds()
    lo_i = np.clip(np.floor((lo - grid.origin) / grid.h).astype(int) + grid.n, 0, size - 1)
    hi_i = np.clip(np.ceil((hi - grid.origin) / grid.h).astype(int) + grid.n, 0, size - 1)
    axes = [grid.origin[k] + grid.h * (np.arange(lo_i[k], hi_i[k] + 1) - grid.n) for k in range(3)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = obstacle.contains(points.reshape(-1, 3)).reshape(points.shape[:-1])
    mask[lo_i[0] : hi_i[0] + 1, lo_i[1] : hi_i[1] + 1, lo_i[2] : hi_i[2] + 1] = torch.from_numpy(inside)
    return mask


def simulate(
    config: SimulationConfig,
    taus: Optional[Sequence[float]] = None,
    record: bool = True,
    progress: bool = True,
):
    """Leapfrog solution of u_tt = Delta u with u = 0 on the obstacle cells.

    Returns the receiver trace; with taus given, also the Laplace field
    accumulated during the run.
    """
    if config.threads:
        torch.set_num_threads(config.threads)
    grid = config.grid()
    size = 2 * grid.n + 1
    h, dt = grid.h, config.dt
    n_steps = config.n_steps
    logger.info(
        f"FDTD grid {size}^3 (h={h}), {n_steps} steps of dt={dt:.5f}, "
        f"obstacle={'none' if config.obstacle is None else config.obstacle.kind}"
    )

    source_nodes, source_weights = config.ball.lattice_quadrature(h, grid.origin)
    receiver_nodes, receiver_weights = config.ball_prime.lattice_quadrature(h, grid.origin)
    si = _grid_indices(source_nodes, grid)
    ri = torch.from_numpy(_grid_indices(receiver_nodes, grid))

    f = torch.zeros((size, size, size), dtype=torch.float64)
    f[tuple(torch.from_numpy(si).T)] = torch.from_numpy(source_weights / h**3)
    mask = _obstacle_mask(config.obstacle, grid) if config.obstacle is not None else None
    if mask is not None and bool(mask[tuple(torch.from_numpy(si).T)].any()):
        raise ConfigurationError("source ball overlaps obstacle cells")

    u_prev = torch.zeros_like(f)
    lap = torch.zeros_like(f)
    inv_h2 = 1.0 / h**2

    _laplacian(f, lap, inv_h2)
    u = dt * f + (dt**3 / 6.0) * lap
    if mask is not None:
        u.masked_fill_(mask, 0.0)
    del f

    def sample(field: torch.Tensor) -> np.ndarray:
        return field[ri[:, 0], ri[:, 1], ri[:, 2]].numpy().copy()

    samples = np.zeros((len(receiver_nodes), n_steps + 1)) if record else None
    accumulator = (
        LaplaceAccumulator(taus, len(receiver_nodes), n_steps, dt) if taus is not None else None
    )
    first = sample(u)
    if record:
        samples[:, 1] = first
    if accumulator is not None:
        accumulator.add(1, first)

    energies = []
    reference = None
    for n in tqdm(range(1, n_steps), disable=not progress, desc="leapfrog"):
        _laplacian(u, lap, inv_h2)
        u_prev.mul_(-1.0).add_(u, alpha=2.0).add_(lap, alpha=dt**2)
        if mask is not None:
            u_prev.masked_fill_(mask, 0.0)
        if n % config.energy_every == 1 or n == n_steps - 1:
            # discrete energy conserved by the scheme, at t_{n + 1/2}
            kinetic = float(((u_prev - u) ** 2).sum()) / dt**2
            potential = -float((u_prev * lap).sum())
            energy = 0.5 * h**3 * (kinetic + potential)
            energies.append((float((n + 0.5) * dt), energy))
            reference = energy if reference is None else reference
            if not np.isfinite(energy) or energy > ENERGY_GROWTH_LIMIT * max(reference, 1e-300):
                raise SimulationError(f"discrete energy blew up at t={n * dt:.4f}: {energy:.4e}")
        u, u_prev = u_prev, u
        values = sample(u)
        if record:
            samples[:, n + 1] = values
        if accumulator is not None:
            accumulator.add(n + 1, values)

    metadata = {
        "config": config.to_dict(),
        "grid_n": grid.n,
        "origin": grid.origin.tolist(),
        "energy": energies,
    }
    trace = None
    if record:
        trace = ReceiverTrace(receiver_nodes, receiver_weights, samples, dt, config.T, h, metadata)
    if accumulator is None:
        return trace
    field = LaplaceField(accumulator.taus, receiver_nodes, receiver_weights, accumulator.values, h)
    return trace, field


def check_causality(
    trace: ReceiverTrace, ball: Ball, floor: float = CAUSALITY_FLOOR
) -> CausalityReport:
    """Largest |u| before the direct arrival time, relative to the trace peak."""
    arrival = np.linalg.norm(trace.nodes - ball.center, axis=1) - ball.radius
    early = trace.times[None, :] < (arrival - CAUSALITY_MARGIN_CELLS * trace.h)[:, None]
    peak = float(np.abs(trace.samples).max())
    if peak == 0:
        return CausalityReport(0.0, 0.0, True)
    ratio = float(np.abs(np.where(early, trace.samples, 0.0)).max() / peak)
    if ratio >= floor:
        logger.warning(f"Causality floor exceeded: early signal {ratio:.2e} of peak")
    return CausalityReport(ratio, peak, ratio < floor)


def energy_history(trace: ReceiverTrace) -> np.ndarray:
    return np.asarray(trace.metadata.get("energy", []), dtype=np.float64).reshape(-1, 2)


def energy_drift(trace: ReceiverTrace, tol: float = ENERGY_DRIFT_TOL) -> float:
    """Largest relative change of the recorded discrete energy; 0 without a record."""
    energy = energy_history(trace)[:, 1]
    if len(energy) == 0 or energy[0] == 0:
        return 0.0
    drift = float(np.max(np.abs(energy / energy[0] - 1.0)))
    if drift > tol:
        logger.warning(f"Discrete energy drifted by {drift:.2e} over the run")
    return drift
