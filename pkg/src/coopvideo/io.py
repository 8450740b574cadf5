"""CSV and JSON writers for sweep tables, slot traces and price trajectories.

Floats are written with ``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

__all__ = ["OutputError", "PRICE_COLUMNS", "write_csv", "write_json", "read_json", "emit_outputs"]

PRICE_COLUMNS = ("iteration", "price", "total_demand")


class OutputError(OSError):
    """Raised when an output file cannot be written; the message names the path."""


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, columns, rows):
    """Write ``rows`` (dicts or sequences) under a header; no rows gives a header-only file."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
                if len(vals) != len(columns):
                    raise ValueError(f"row has {len(vals)} fields, header has {len(columns)}")
                w.writerow([_cell(v) for v in vals])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def write_json(path, obj):
    path = Path(path)
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def emit_outputs(out_dir, name, columns, rows, summary=None, fmt="csv"):
    """Write ``<name>.csv`` (or ``<name>.json``) plus ``<name>_summary.json``.

    Returns the list of written paths.
    """
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    out = Path(out_dir)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    written = []
    if fmt == "csv":
        written.append(write_csv(out / f"{name}.csv", columns, rows))
    else:
        recs = [r if isinstance(r, dict) else dict(zip(columns, r)) for r in rows]
        written.append(write_json(out / f"{name}.json", {"columns": list(columns), "rows": recs}))
    if summary is not None:
        written.append(write_json(out / f"{name}_summary.json", summary))
    return written
