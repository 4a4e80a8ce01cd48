import json
from types import SimpleNamespace

import numpy as np
import pytest

from src.core import verify
from src.core.errors import DegenerateReflectorError
from src.core.verify import Check, run_verify
from src.models.indicator import IndicatorCurve
from src.models.probe import FirstReflection

S1_KAPPA = 5.73590


def passing(rng, quick):
    return {"passed": True, "value": 1.0}


def failing(rng, quick):
    return {"passed": False, "value": 2.0}


def crashing(rng, quick):
    raise RuntimeError("boom")


CHECKS = [
    Check("passing", "always", passing, False),
    Check("failing", "never", failing, False),
    Check("crashing", "raises", crashing, False),
    Check("slow", "long run", passing, True),
]


def test_results_and_report(tmp_path):
    results = run_verify(tmp_path, checks=CHECKS)
    assert [(r.name, r.passed) for r in results] == [
        ("passing", True),
        ("failing", False),
        ("crashing", False),
        ("slow", True),
    ]
    assert "RuntimeError: boom" in results[2].details["error"]
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert not report["passed"]
    assert report["determinant_variant"] == "quarter"
    assert [c["name"] for c in report["checks"]] == ["passing", "failing", "crashing", "slow"]


def test_quick_skips_slow_checks():
    results = run_verify(quick=True, checks=CHECKS)
    assert "slow" not in [r.name for r in results]


def test_only_selects_by_name():
    results = run_verify(only=["failing"], checks=CHECKS)
    assert [r.name for r in results] == ["failing"]


class SteadySource:
    """Exact S1 decay on a positive indicator, no simulation behind it."""

    def __init__(self, *args, **kwargs):
        taus = np.geomspace(4.0, 40.0, 12)
        self._curve = IndicatorCurve(taus, -S1_KAPPA * taus, np.ones_like(taus), "fdtd")

    def first_reflection_distance(self):
        return FirstReflection(6.735898, S1_KAPPA, 0.0, self._curve, {"decay_fit": {"window": [4.0, 40.0]}})

    def curve(self):
        return self._curve


@pytest.mark.parametrize(
    "center, radius, passed",
    [
        ((0.02, 0.0, 0.0), 1.03, True),
        ((0.3, 0.0, 0.0), 1.0, False),
        ((0.0, 0.0, 0.0), 1.25, False),
    ],
)
def test_fdtd_check_needs_the_ball_too(monkeypatch, center, radius, passed):
    monkeypatch.setattr(verify, "FDTDSource", SteadySource)
    monkeypatch.setattr(
        verify, "reconstruct_ball", lambda *a, **k: SimpleNamespace(center=np.array(center), radius=radius)
    )
    details = verify.check_fdtd_s1(np.random.default_rng(0), quick=False)
    assert details["rate_within_3_percent"]
    assert details["passed"] is passed


def test_fdtd_check_fails_when_the_ball_cannot_be_rebuilt(monkeypatch):
    def refuse(*args, **kwargs):
        raise DegenerateReflectorError("two reflector clusters")

    monkeypatch.setattr(verify, "FDTDSource", SteadySource)
    monkeypatch.setattr(verify, "reconstruct_ball", refuse)
    details = verify.check_fdtd_s1(np.random.default_rng(0), quick=False)
    assert not details["passed"]
    assert "DegenerateReflectorError" in details["ball_error"]
