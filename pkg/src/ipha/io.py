"""JSON documents for instances, solutions and experiment configs.

Every document carries a ``schema`` field naming its kind and version.
Files are written with one short numeric row per line so fixtures diff
cleanly; floats use Python's shortest round-trip ``repr``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import IphaError, SchemaError
from .problem import SviInstance

INSTANCE_SCHEMA = "ipha-instance/1"
SOLUTION_SCHEMA = "ipha-solution/1"
EXPERIMENT_SCHEMA = "ipha-experiment/1"


def _scalar(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            raise SchemaError(f"non-finite number {v!r} cannot be written")
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return json.dumps(v)


def _is_flat(v) -> bool:
    return all(not isinstance(e, (list, tuple, dict)) for e in v)


def dumps(obj, indent: int = 0) -> str:
    """Serialize with dict keys and nested lists one per line, flat lists inline."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if _is_flat(obj):
            return "[" + ", ".join(_scalar(e) for e in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(e, indent + 1) for e in obj) + "\n" + end + "]"
    return _scalar(obj)


def write_document(path, doc: dict) -> None:
    path = Path(path)
    try:
        path.write_text(dumps(doc) + "\n")
    except OSError as e:
        raise IphaError(f"cannot write {path}: {e.strerror}") from e


def read_document(path, schema: str | None = None) -> dict:
    """Parse a JSON file, reporting syntax errors with line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SchemaError(f"cannot read {path}: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    if schema is not None and doc.get("schema") != schema:
        raise SchemaError(f"{path}: field 'schema' is {doc.get('schema')!r}, expected {schema!r}")
    return doc


def _field_context(path, fn, *args):
    """Run ``fn`` and re-raise missing fields and bad values with the file name."""
    try:
        return fn(*args)
    except KeyError as e:
        raise SchemaError(f"{path}: missing field {e.args[0]!r}") from None
    except (ValueError, TypeError) as e:
        raise SchemaError(f"{path}: {e}") from None


# -- instances ---------------------------------------------------------------


def instance_document(inst: SviInstance) -> dict:
    return {"schema": INSTANCE_SCHEMA, **inst.to_dict()}


def save_instance(path, inst: SviInstance) -> None:
    write_document(path, instance_document(inst))


def load_instance(path) -> SviInstance:
    doc = read_document(path, INSTANCE_SCHEMA)
    return _field_context(path, SviInstance.from_dict, doc)


# -- solutions ---------------------------------------------------------------


def solution_document(x, w, **meta) -> dict:
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return {"schema": SOLUTION_SCHEMA, "scenario_count": x.shape[0], "n": x.shape[1],
            **meta, "x": x, "w": w}


def save_solution(path, x, w, **meta) -> None:
    write_document(path, solution_document(x, w, **meta))


def load_solution(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Return ``(x, w, metadata)``."""
    doc = read_document(path, SOLUTION_SCHEMA)

    def parse(d):
        S, n = int(d["scenario_count"]), int(d["n"])
        out = []
        for name in ("x", "w"):
            a = np.asarray(d[name], dtype=float)
            if a.shape != (S, n):
                raise ValueError(f"field {name!r} has shape {a.shape}, header says {(S, n)}")
            out.append(a)
        meta = {k: v for k, v in d.items() if k not in ("x", "w", "schema")}
        return out[0], out[1], meta

    return _field_context(path, parse, doc)
