"""Point-table ingestion: CSV with header ``id,x1,...,xd[,y]``."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidData
from .graph import SpatialDataset

__all__ = ["read_points_csv", "write_points_csv"]

_COORD = re.compile(r"^x([1-9][0-9]*)$")


def _header(cols: list[str], path) -> tuple[int, bool]:
    cols = [c.strip() for c in cols]
    if not cols or cols[0] != "id":
        raise FormatError(f"{path}: first column must be 'id'")
    has_y = cols[-1] == "y"
    coords = cols[1:-1] if has_y else cols[1:]
    if not coords:
        raise FormatError(f"{path}: no coordinate columns")
    for k, c in enumerate(coords, 1):
        mt = _COORD.match(c)
        if not mt or int(mt.group(1)) != k:
            raise FormatError(f"{path}: expected column x{k}, found {c!r}")
    return len(coords), has_y


def read_points_csv(path) -> SpatialDataset:
    """Rows may come in any order; ids must be exactly ``0..n-1``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise FormatError(f"{path}: empty file")
    d, has_y = _header(rows[0], path)
    width = 1 + d + int(has_y)
    ids, vals = [], []
    for lineno, r in enumerate(rows[1:], 2):
        if len(r) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(r)}")
        try:
            ids.append(int(r[0]))
            vals.append([float(c) for c in r[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not ids:
        raise InvalidData(f"{path}: no data rows")
    ids = np.asarray(ids)
    order = np.argsort(ids, kind="stable")
    if not np.array_equal(ids[order], np.arange(len(ids))):
        raise InvalidData(f"{path}: ids must be unique and cover 0..{len(ids) - 1}")
    arr = np.asarray(vals, dtype=float)[order]
    if has_y:
        return SpatialDataset(arr[:, :d], arr[:, d])
    return SpatialDataset(arr)


def write_points_csv(data: SpatialDataset, path) -> None:
    cols = ["id"] + [f"x{k}" for k in range(1, data.d + 1)]
    if data.responses is not None:
        cols.append("y")
    lines = [",".join(cols)]
    for i in range(data.n):
        row = [str(i)] + [repr(float(v)) for v in data.points[i]]
        if data.responses is not None:
            row.append(repr(float(data.responses[i])))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
