import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Union

import numpy as np

logger = logging.getLogger(__name__)


def to_plain(obj: Any) -> Any:
    """numpy scalars and arrays, tuples and enums turned into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        # JSON has no inf / nan
        return value if np.isfinite(value) else str(value)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Union[str, Path], data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_plain(data), f, indent=4, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def format_table(rows: list, headers: list) -> str:
    """Fixed-width text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
