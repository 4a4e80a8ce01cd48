import numpy as np
import pytest

from src.core.errors import ConfigurationError
from src.core.geometry import Ball
from src.core.verify import check_fdtd_self
from src.data.obstacle import Sphere
from src.data.trace import ReceiverTrace
from src.models.wavesim import (
    CFL_LIMIT,
    LaplaceAccumulator,
    SimulationConfig,
    accumulate_laplace,
    check_causality,
    energy_drift,
    energy_history,
    free_space_solution,
    simulate,
    trapezoid_weights,
)

SOURCE = Ball((0.0, 0.0, 0.0), 0.3)
RECEIVER = Ball((1.2, 0.0, 0.0), 0.3)


def test_cfl_bound_is_enforced():
    with pytest.raises(ConfigurationError):
        SimulationConfig(SOURCE, RECEIVER, cfl=CFL_LIMIT * 1.01)
    config = SimulationConfig(SOURCE, RECEIVER, cfl=CFL_LIMIT, T=1.0, h=0.1)
    assert config.dt <= CFL_LIMIT * config.h + 1e-15


def test_box_must_cover_the_causal_margin():
    with pytest.raises(ConfigurationError):
        SimulationConfig(SOURCE, RECEIVER, T=4.0, h=0.1, half_width=1.0)


def test_obstacle_must_clear_the_hull():
    with pytest.raises(ConfigurationError):
        SimulationConfig(Ball((4.0, 0.0, 0.0), 0.5), Ball((0.0, 4.0, 0.0), 0.5), obstacle=Sphere(radius=3.0))


def test_trapezoid_laplace_of_constant_trace():
    n_steps, T = 4000, 4.0
    dt = T / n_steps
    trace = ReceiverTrace(np.zeros((1, 3)), np.ones(1), np.ones((1, n_steps + 1)), dt, T, 0.1)
    taus = np.array([0.5, 2.0, 5.0])
    field = accumulate_laplace(trace, taus)
    np.testing.assert_allclose(field.values[:, 0], (1.0 - np.exp(-taus * T)) / taus, rtol=1e-5)
    assert np.isclose(trapezoid_weights(n_steps, dt).sum(), T)



def test_energy_drift_is_read_from_the_record(caplog):
    trace = ReceiverTrace(np.zeros((1, 3)), np.ones(1), np.zeros((1, 3)), 0.1, 0.2, 0.1)
    assert energy_drift(trace) == 0.0
    trace.metadata["energy"] = [(0.05, 2.0), (0.15, 2.0), (0.25, 2.5)]
    assert np.isclose(energy_drift(trace), 0.25)
    assert "energy drifted" in caplog.text

def test_running_accumulator_matches_batch_sum():
    rng = np.random.default_rng(0)
    n_nodes, n_steps, dt = 5, 50, 0.02
    samples = rng.normal(size=(n_nodes, n_steps + 1))
    trace = ReceiverTrace(rng.normal(size=(n_nodes, 3)), np.ones(n_nodes), samples, dt, n_steps * dt, 0.1)
    taus = [1.0, 3.0]
    accumulator = LaplaceAccumulator(taus, n_nodes, n_steps, dt)
    for n in range(n_steps + 1):
        accumulator.add(n, samples[:, n])
    np.testing.assert_allclose(accumulator.values, accumulate_laplace(trace, taus).values, rtol=1e-12)


def test_free_space_solution_regimes():
    ball = Ball(np.zeros(3), 0.5)
    assert np.isclose(free_space_solution(np.zeros(3), 0.3, ball), 0.3)
    assert free_space_solution(np.zeros(3), 0.6, ball) == 0.0
    # continuous where the sphere S(x, t) first touches dB
    x = np.array([0.2, 0.0, 0.0])
    below, above = free_space_solution(x, 0.3 - 1e-9, ball), free_space_solution(x, 0.3 + 1e-9, ball)
    assert np.isclose(below, above, atol=1e-8)
    # silent before the wave arrives from the nearest point of B
    assert free_space_solution(np.array([2.0, 0.0, 0.0]), 1.4, ball) == 0.0


def test_small_free_space_run():
    config = SimulationConfig(SOURCE, RECEIVER, h=0.1, T=1.5)
    taus = [2.0, 4.0]
    trace, field = simulate(config, taus, progress=False)
    assert trace.samples.shape == (len(trace.nodes), config.n_steps + 1)
    assert np.all(trace.samples[:, 0] == 0.0)
    assert np.isclose(trace.weights.sum(), RECEIVER.volume, rtol=1e-12)
    np.testing.assert_allclose(field.integral(), accumulate_laplace(trace, taus).integral(), rtol=1e-10)
    assert check_causality(trace, SOURCE).ok
    assert len(energy_history(trace)) > 1
    assert energy_drift(trace) < 1e-8


def test_obstacle_cells_are_silent():
    config = SimulationConfig(
        Ball((1.5, 0.0, 0.0), 0.3), Ball((0.0, 1.5, 0.0), 0.3), obstacle=Sphere(radius=0.6), h=0.1, T=2.0
    )
    trace = simulate(config, progress=False)
    assert len(energy_history(trace)) > 1
    assert energy_drift(trace) < 1e-8
    assert trace.metadata["config"]["obstacle"]["kind"] == "sphere"


@pytest.mark.slow
def test_free_space_oracle_and_convergence():
    details = check_fdtd_self(np.random.default_rng(0), quick=False)
    assert details["passed"], details
