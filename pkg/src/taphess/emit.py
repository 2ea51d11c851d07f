"""CSV and JSON serialization of experiment records.

CSV (``layout == "replicas"``): header ``replica,status,<columns>``, one
row per replica (observables blank for failed replicas), then one row with
``replica = aggregate`` holding the column means over successful replicas.
CSV (``layout == "grid"``): header ``<columns>`` and one row per point.

JSON: a single object with keys, in this order, ``schema_version``,
``experiment``, ``version``, ``config``, ``columns``, ``rows``,
``aggregate``, ``summary``, ``duration_seconds``.

All floats are written with 17 significant digits, so parsing reproduces
them bit for bit.  The wall-clock duration appears only in JSON; CSV output
is a deterministic function of the configuration.
"""

from __future__ import annotations

import json
import math
import sys
from enum import Enum
from pathlib import Path
from typing import IO

import numpy as np

from .experiments import ExperimentRecord

SCHEMA_VERSION = 1


class EmitError(OSError):
    pass


def format_float(x: float) -> str:
    """17 significant digits, always spelled as a float (``1.0``, not ``1``)."""
    text = format(float(x), ".17g")
    return text if any(c in text for c in ".en") else text + ".0"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v) if math.isfinite(v) else ""
    return str(v)


def to_csv(record: ExperimentRecord) -> str:
    if record.layout == "grid":
        lines = [",".join(record.columns)]
        lines += [",".join(_csv_cell(r.values.get(c)) for c in record.columns) for r in record.rows]
        return "\n".join(lines) + "\n"
    lines = [",".join(["replica", "status", *record.columns])]
    for r in record.rows:
        cells = [str(r.replica), "ok" if r.ok else "failed"]
        cells += [_csv_cell(r.values.get(c)) if r.ok else "" for c in record.columns]
        lines.append(",".join(cells))
    if record.rows:
        mean = record.aggregate()["mean"]
        lines.append(",".join(["aggregate", "mean", *(_csv_cell(mean[c]) for c in record.columns)]))
    return "\n".join(lines) + "\n"


def _json_value(v, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if v is None:
        return "null"
    if isinstance(v, Enum):
        v = v.value
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v) if math.isfinite(v) else "null"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{pad}{_json_value(str(k), indent, level + 1)}: {_json_value(x, indent, level + 1)}" for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        if len(v) == 0:
            return "[]"
        items = [f"{pad}{_json_value(x, indent, level + 1)}" for x in v]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def to_json(record: ExperimentRecord, indent: int = 2) -> str:
    rows = [
        {
            "replica": r.replica,
            "status": "ok" if r.ok else "failed",
            "error": r.error,
            "values": {c: r.values.get(c) for c in record.columns} if r.ok else None,
        }
        for r in record.rows
    ]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "experiment": record.config.get("experiment"),
        "version": record.version,
        "config": record.config,
        "columns": record.columns,
        "rows": rows,
        "aggregate": record.aggregate() if record.layout == "replicas" else None,
        "summary": record.summary,
        "duration_seconds": record.duration_seconds,
    }
    return _json_value(doc, indent, 0) + "\n"


def emit(record: ExperimentRecord, path: str | Path | IO[str] | None, fmt: str = "csv") -> None:
    """Write ``record`` as ``fmt`` to ``path`` (a path, an open text stream, or ``None`` for stdout)."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    text = to_csv(record) if fmt == "csv" else to_json(record)
    if path is None:
        sys.stdout.write(text)
        return
    if hasattr(path, "write"):
        path.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc.strerror or exc}") from exc
