"""CSV and JSON writers with a fixed numeric format.

Floats are written with 17 significant digits so a round trip through the CSV
is exact; NaN becomes an empty cell and is counted in the summary.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..errors import ConfigurationError, StefanLabError

SCHEMA_VERSION = "1.0"


class OutputError(StefanLabError):
    exit_code = 1


def format_value(v: Any) -> tuple[str, bool]:
    """Cell text and whether the value was NaN."""
    if v is None:
        return "", False
    if isinstance(v, (bool, np.bool_)):
        return ("1" if v else "0"), False
    if isinstance(v, (int, np.integer)):
        return str(int(v)), False
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "", True
        return format(f, ".17g"), False
    return str(v), False


def csv_text(records: Iterable[Mapping[str, Any]], schema: Sequence[str]) -> tuple[str, dict]:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(schema)
    nan_cells: dict[str, int] = {}
    rows = 0
    for rec in records:
        extra = set(rec) - set(schema)
        if extra:
            raise ConfigurationError(f"record has columns outside the schema: {sorted(extra)}")
        cells = []
        for col in schema:
            text, was_nan = format_value(rec.get(col))
            if was_nan:
                nan_cells[col] = nan_cells.get(col, 0) + 1
            cells.append(text)
        writer.writerow(cells)
        rows += 1
    return buf.getvalue(), {"rows": rows, "nan_cells": nan_cells}


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if not math.isfinite(f) else f
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_outputs(records: Iterable[Mapping[str, Any]], schema: Sequence[str],
                  directory: str | Path, stem: str, summary: Mapping[str, Any] | None = None
                  ) -> dict[str, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns the paths."""
    directory = Path(directory)
    text, stats = csv_text(records, schema)
    summ = {"schema_version": SCHEMA_VERSION, "columns": list(schema), **stats}
    if stats["nan_cells"]:
        summ["nan_policy"] = "NaN written as empty cell"
    if summary:
        summ.update(_jsonable(dict(summary)))
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(text, encoding="utf-8", newline="")
        json_path.write_text(json.dumps(_jsonable(summ), indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write outputs in {directory}: {exc}") from exc
    return {"csv": csv_path, "json": json_path}


def write_summary(summary: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    data = {"schema_version": SCHEMA_VERSION, **_jsonable(dict(summary))}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path
