"""Small shared helpers for deterministic text output."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any


def fmt_float(x: float) -> float | str:
    """Round-trip float token for text formats: 17 significant digits.

    Returned as a raw JSON-safe object: floats are emitted via a 17g string
    and parsed back, which keeps files byte-stable across runs.
    """
    if x is None:
        return None
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return repr(x)
    return float(f"{x:.17g}")


def float_str(x: float) -> str:
    return f"{x:.17g}"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Stable hash of a flat configuration mapping."""
    parts = []
    for key in sorted(config):
        val = config[key]
        if isinstance(val, float):
            val = float_str(val)
        parts.append(f"{key}={val}")
    digest = hashlib.sha256("\n".join(parts).encode()).hexdigest()
    return digest[:16]
