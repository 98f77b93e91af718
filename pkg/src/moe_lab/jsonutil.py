"""JSON emission with fixed float formatting.

All artifact files (measures, fit results, loss reports, slope fits) go
through dumps() so that floats are written with 17 significant digits,
which round-trips IEEE doubles exactly, and dict key order is preserved
as inserted.
"""

from __future__ import annotations

import json
import math

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite value cannot be serialized: %r" % x)
    return format(x, ".17g")


def _emit(obj, parts: list) -> None:
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(fmt_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                parts.append(", ")
            parts.append(json.dumps(str(key)))
            parts.append(": ")
            _emit(val, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        parts.append("[")
        for i, val in enumerate(seq):
            if i:
                parts.append(", ")
            _emit(val, parts)
        parts.append("]")
    else:
        raise TypeError("cannot serialize %r" % type(obj))


def dumps(obj) -> str:
    """Serialize to JSON with 17-significant-digit floats."""
    parts: list = []
    _emit(obj, parts)
    return "".join(parts)


def loads(text: str):
    return json.loads(text)
