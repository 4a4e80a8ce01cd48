import hypothesis
import numpy as np
import pytest

from src.core.geometry import Ball
from src.data.obstacle import Sphere

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)


@pytest.fixture
def s1():
    """Unit sphere seen from p = (4, 0, 0) and p' = (0, 4, 0), eta = eta' = 0.5."""
    return Sphere(), Ball((4.0, 0.0, 0.0), 0.5), Ball((0.0, 4.0, 0.0), 0.5)


@pytest.fixture
def s1_q():
    return np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
