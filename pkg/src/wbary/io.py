"""JSON and CSV serialization of measures, certificates and solutions.

Measure files follow two schemas::

    {"type": "discrete", "dim": d, "points": [[...], ...], "weights": [...]}
    {"type": "grid", "min": [...], "max": [...], "shape": [...], "values": [...]}

Grid values are flattened row-major. Floats are written with 17 significant
digits so that a write/read round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .measures import BoxDomain, DiscreteMeasure, GridDensity


class SchemaError(ValueError):
    """Malformed input file; carries the file and the offending field path."""

    def __init__(self, message: str, file=None, field: str | None = None):
        super().__init__(message)
        self.file = None if file is None else str(file)
        self.field = field


def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    return f"{x:.17g}"


def dumps(obj, indent: int | None = None) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = "" if indent is None else "\n"

    def enc(o, depth):
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return format_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), depth)
        inner = "" if indent is None else " " * (indent * (depth + 1))
        outer = "" if indent is None else " " * (indent * depth)
        sep = "," + pad
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{inner}{json.dumps(str(k))}: {enc(v, depth + 1)}" for k, v in o.items()]
            return "{" + pad + sep.join(items) + pad + outer + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            # numeric rows stay on one line
            if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in o):
                return "[" + ", ".join(enc(v, depth) for v in o) + "]"
            return "[" + pad + sep.join(inner + enc(v, depth + 1) for v in o) + pad + outer + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj, indent=1) + "\n")
    return path


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise SchemaError("file not found", path) from None
    except OSError as exc:
        raise SchemaError(f"cannot read file: {exc.strerror}", path) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON at line {exc.lineno} column {exc.colno}", path) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _numbers(obj, field: str, path, ndim: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError("expected numbers", path, field) from None
    if ndim is not None and arr.ndim != ndim:
        raise SchemaError(f"expected a {ndim}-d array, got {arr.ndim}-d", path, field)
    if not np.all(np.isfinite(arr)):
        raise SchemaError("non-finite value", path, field)
    return arr


def _require(data: dict, key: str, path):
    if key not in data:
        raise SchemaError("missing field", path, key)
    return data[key]


def measure_from_dict(data, path=None):
    """Parse either measure schema; raises :class:`SchemaError` naming the field."""
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", path, "")
    kind = _require(data, "type", path)
    if kind == "discrete":
        dim = _require(data, "dim", path)
        if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
            raise SchemaError("dim must be a positive integer", path, "dim")
        points = _numbers(_require(data, "points", path), "points", path)
        if points.ndim == 1 and dim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[1] != dim:
            raise SchemaError(f"expected a list of {dim}-vectors", path, "points")
        weights = _numbers(_require(data, "weights", path), "weights", path, 1)
        if weights.shape[0] != points.shape[0]:
            raise SchemaError(f"{weights.shape[0]} weights for {points.shape[0]} points", path, "weights")
        if weights.shape[0] == 0:
            raise SchemaError("at least one atom required", path, "points")
        return DiscreteMeasure(points, weights)
    if kind == "grid":
        lo = _numbers(_require(data, "min", path), "min", path, 1)
        hi = _numbers(_require(data, "max", path), "max", path, 1)
        if lo.shape != hi.shape or lo.size == 0:
            raise SchemaError("min and max must be nonempty and of equal length", path, "max")
        if np.any(lo >= hi):
            raise SchemaError("min must be below max on every axis", path, "max")
        shape = _require(data, "shape", path)
        if (
            not isinstance(shape, list)
            or len(shape) != lo.size
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape)
        ):
            raise SchemaError(f"expected {lo.size} positive integers", path, "shape")
        values = _numbers(_require(data, "values", path), "values", path, 1)
        if values.size != int(np.prod(shape)):
            raise SchemaError(f"{values.size} values for a grid of {int(np.prod(shape))} cells", path, "values")
        return GridDensity(BoxDomain(lo, hi), values.reshape(shape))
    raise SchemaError(f"unknown measure type {kind!r}", path, "type")


def measure_to_dict(measure) -> dict:
    if isinstance(measure, DiscreteMeasure):
        return {"type": "discrete", "dim": measure.dim, "points": measure.points, "weights": measure.weights}
    if isinstance(measure, GridDensity):
        return {
            "type": "grid",
            "min": measure.domain.lower,
            "max": measure.domain.upper,
            "shape": list(measure.shape),
            "values": measure.values.ravel(),
        }
    raise TypeError(f"cannot serialize {type(measure).__name__}")


def read_measure(path):
    return measure_from_dict(read_json(path), path)


def write_measure(path, measure, **extra) -> Path:
    data = measure_to_dict(measure)
    data.update(extra)
    return write_json(path, data)


def certificate_to_dict(cert, method: str = "lp", tol: float = 0.0) -> dict:
    """Cost, sparse plan triplets ``(row, col, mass)`` and both potentials."""
    rows, cols = np.nonzero(cert.plan > tol)
    return {
        "cost": cert.cost,
        "method": method,
        "plan": {
            "shape": list(cert.plan.shape),
            "rows": rows.tolist(),
            "cols": cols.tolist(),
            "values": cert.plan[rows, cols],
        },
        "phi": cert.phi,
        "psi": cert.psi,
    }


def write_trace(path, trace) -> Path:
    path = Path(path)
    lines = ["iteration,objective"] + [f"{i},{format_float(v)}" for i, v in enumerate(trace)]
    path.write_text("\n".join(lines) + "\n")
    return path
