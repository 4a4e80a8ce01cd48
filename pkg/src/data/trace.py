import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from src.core.errors import TraceFormatError

logger = logging.getLogger(__name__)

MAGIC = b"ENCL1"
VERSION = 1
# version, n_nodes, n_steps, dt, T, h
HEADER = struct.Struct("<HIIddd")


@dataclass
class ReceiverTrace:
    """Wave field sampled on the receiver quadrature nodes for t in [0, T]."""

    nodes: np.ndarray
    weights: np.ndarray
    samples: np.ndarray
    dt: float
    T: float
    h: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        assert self.samples.shape[0] == len(self.nodes), (
            f"samples have {self.samples.shape[0]} rows for {len(self.nodes)} nodes"
        )
        assert len(self.weights) == len(self.nodes), "one weight per node required"

    @property
    def n_steps(self) -> int:
        return self.samples.shape[1] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def sidecar(self) -> dict:
        return {
            "dt": self.dt,
            "T": self.T,
            "h": self.h,
            "n_nodes": len(self.nodes),
            "n_steps": self.n_steps,
            **self.metadata,
        }


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def save_trace(trace: ReceiverTrace, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(HEADER.pack(VERSION, len(trace.nodes), trace.n_steps, trace.dt, trace.T, trace.h))
        f.write(trace.nodes.astype("<f8").tobytes())
        f.write(trace.weights.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(trace.samples).astype("<f8").tobytes())
    with open(sidecar_path(path), "w") as f:
        json.dump(trace.sidecar(), f, indent=4, sort_keys=True)
    logger.info(f"Wrote trace archive {path} ({len(trace.nodes)} nodes, {trace.n_steps} steps)")


def load_trace(path: Union[str, Path]) -> ReceiverTrace:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise TraceFormatError(f"{path} is not a trace archive (bad magic {data[:5]!r})")
    offset = len(MAGIC)
    if len(data) < offset + HEADER.size:
        raise TraceFormatError(f"{path}: truncated header")
    version, n_nodes, n_steps, dt, T, h = HEADER.unpack_from(data, offset)
    if version != VERSION:
        raise TraceFormatError(f"{path}: unsupported archive version {version}")
    offset += HEADER.size
    expected = 8 * (3 * n_nodes + n_nodes + n_nodes * (n_steps + 1))
    if len(data) - offset != expected:
        raise TraceFormatError(
            f"{path}: payload has {len(data) - offset} bytes, header implies {expected}"
        )
    values = np.frombuffer(data, dtype="<f8", offset=offset)
    nodes = values[: 3 * n_nodes].reshape(n_nodes, 3)
    weights = values[3 * n_nodes : 4 * n_nodes]
    samples = values[4 * n_nodes :].reshape(n_nodes, n_steps + 1)
    metadata = {}
    side = sidecar_path(path)
    if side.exists():
        with open(side) as f:
            metadata = json.load(f)
        for key in ("dt", "T", "h", "n_nodes", "n_steps"):
            metadata.pop(key, None)
    return ReceiverTrace(nodes.copy(), weights.copy(), samples.copy(), dt, T, h, metadata)
