import json

import numpy as np
import pytest

from src.core.config import (
    BallConfig,
    CurvatureConfig,
    ObstacleConfig,
    RunConfig,
    TauWindowConfig,
)
from src.core.errors import ConfigurationError
from src.data.obstacle import Ellipsoid, Sphere


def test_presets_are_valid():
    for config in (RunConfig.s1(), RunConfig.desk()):
        obstacle, ball, ball_prime = config.validate()
        assert ball.radius == config.ball.radius
    assert RunConfig.s1().scan_shift() == 0.25


def test_json_file_name_becomes_run_name(tmp_path):
    path = tmp_path / "my_run.json"
    data = RunConfig.s1().to_dict()
    data.pop("name")
    path.write_text(json.dumps(data))
    config = RunConfig.from_json(path)
    assert config.name == "my_run"
    assert config.ball.center == (4.0, 0.0, 0.0)
    assert config.curvature.shifts == (0.05, 0.45)


def test_unknown_keys_are_refused():
    data = RunConfig.s1().to_dict()
    data["colour"] = "blue"
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(data)
    data = RunConfig.s1().to_dict()
    data["scan"]["omega"] = 3
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(data)


def test_missing_section_is_refused():
    data = RunConfig.s1().to_dict()
    del data["ball_prime"]
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(data)


def test_unknown_mode_is_refused():
    with pytest.raises(ConfigurationError):
        RunConfig(ObstacleConfig(), BallConfig((4.0, 0.0, 0.0), 0.5), BallConfig((0.0, 4.0, 0.0), 0.5), mode="magic")


def test_overlapping_balls_are_refused():
    config = RunConfig.s1()
    config.ball_prime = BallConfig((4.5, 0.5, 0.0), 0.5)
    with pytest.raises(ConfigurationError):
        config.validate()


def test_hull_touching_the_obstacle_is_refused():
    config = RunConfig.s1()
    config.ball = BallConfig((4.0, -4.0, 0.0), 0.5)
    config.ball_prime = BallConfig((-4.0, 4.0, 0.0), 0.5)
    with pytest.raises(ConfigurationError):
        config.validate()


def test_short_observation_time_is_refused():
    config = RunConfig.s1()
    config.mode = "fdtd"
    config.fdtd.T = 5.0
    with pytest.raises(ConfigurationError):
        config.validate()


@pytest.mark.parametrize("shifts", [(0.3, 0.2), (0.1, 0.5)])
def test_curvature_shifts_are_checked(shifts):
    config = RunConfig.s1()
    config.curvature = CurvatureConfig(shifts=shifts)
    with pytest.raises(ConfigurationError):
        config.validate()


def test_scan_shift_is_checked():
    config = RunConfig.s1()
    config.scan.s = 0.5
    with pytest.raises(ConfigurationError):
        config.validate()


@pytest.mark.parametrize("kwargs", [{"tau_min": 0.0}, {"tau_min": 5.0, "tau_max": 4.0}, {"count": 1}])
def test_bad_tau_window(kwargs):
    with pytest.raises(ConfigurationError):
        TauWindowConfig(**kwargs)


def test_tau_grid_is_geometric():
    grid = TauWindowConfig(tau_min=2.0, tau_max=32.0, count=5).grid()
    np.testing.assert_allclose(grid, [2.0, 4.0, 8.0, 16.0, 32.0])


def test_obstacle_kinds():
    assert isinstance(ObstacleConfig.unit_sphere().build(), Sphere)
    assert isinstance(ObstacleConfig.ellipsoid_211().build(), Ellipsoid)
    with pytest.raises(ConfigurationError):
        ObstacleConfig(kind="ellipsoid").build()
    with pytest.raises(ConfigurationError):
        ObstacleConfig(kind="mesh").build()
    with pytest.raises(ConfigurationError):
        ObstacleConfig(kind="torus").build()
