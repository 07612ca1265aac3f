"""JSON and CSV rendering with 17-significant-digit doubles."""

from __future__ import annotations

import json
import math
from typing import Any

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _encode(obj: Any, indent: int | None, level: int) -> str:
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if indent is None:
        sep, pad, end = ", ", "", ""
    else:
        sep = ",\n" + " " * (indent * (level + 1))
        pad = "\n" + " " * (indent * (level + 1))
        end = "\n" + " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            json.dumps(str(k)) + ": " + _encode(v, indent, level + 1)
            for k, v in obj.items()
        ]
        return "{" + pad + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaf arrays stay on one line
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, None, 0) for v in obj) + "]"
        items = [_encode(v, indent, level + 1) for v in obj]
        return "[" + pad + sep.join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent: int | None = 2) -> str:
    """Serialize ``obj`` to JSON, rendering every float with 17 significant digits."""
    return _encode(obj, indent, 0)


def loads(text: str) -> Any:
    return json.loads(text)


def write_matrix_csv(path, A: np.ndarray) -> None:
    """Row-major CSV dump of a matrix for cross-tool diffing."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in A:
            fh.write(",".join(fmt_float(v) for v in row))
            fh.write("\n")
