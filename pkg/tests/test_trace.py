import json

import numpy as np
import pytest

from src.core.errors import TraceFormatError
from src.data.trace import HEADER, MAGIC, ReceiverTrace, load_trace, save_trace, sidecar_path


@pytest.fixture
def trace():
    rng = np.random.default_rng(1)
    return ReceiverTrace(
        nodes=rng.normal(size=(7, 3)),
        weights=rng.uniform(size=7),
        samples=rng.normal(size=(7, 21)),
        dt=0.025,
        T=0.5,
        h=0.05,
        metadata={"grid_n": 40, "energy": [[0.0125, 1.5]]},
    )


def test_archive_keeps_samples_bit_exact(trace, tmp_path):
    path = tmp_path / "run" / "trace.encl"
    save_trace(trace, path)
    loaded = load_trace(path)
    assert np.array_equal(loaded.samples, trace.samples)
    assert np.array_equal(loaded.nodes, trace.nodes)
    assert (loaded.dt, loaded.T, loaded.h, loaded.n_steps) == (0.025, 0.5, 0.05, 20)
    assert loaded.metadata == {"grid_n": 40, "energy": [[0.0125, 1.5]]}


def test_sidecar_describes_the_archive(trace, tmp_path):
    path = tmp_path / "trace.encl"
    save_trace(trace, path)
    side = json.loads(sidecar_path(path).read_text())
    assert sidecar_path(path).name == "trace.encl.json"
    assert side["n_nodes"] == 7 and side["n_steps"] == 20


def test_missing_sidecar_is_tolerated(trace, tmp_path):
    path = tmp_path / "trace.encl"
    save_trace(trace, path)
    sidecar_path(path).unlink()
    assert load_trace(path).metadata == {}


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.encl"
    path.write_bytes(b"NOTIT" + bytes(64))
    with pytest.raises(TraceFormatError):
        load_trace(path)


def test_truncated_payload(trace, tmp_path):
    path = tmp_path / "trace.encl"
    save_trace(trace, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TraceFormatError):
        load_trace(path)


def test_unknown_version(tmp_path):
    path = tmp_path / "future.encl"
    path.write_bytes(MAGIC + HEADER.pack(99, 0, 0, 0.1, 1.0, 0.1))
    with pytest.raises(TraceFormatError):
        load_trace(path)


def test_trace_rejects_mismatched_weights():
    with pytest.raises(AssertionError):
        ReceiverTrace(np.zeros((3, 3)), np.ones(2), np.zeros((3, 5)), 0.1, 0.4, 0.1)
