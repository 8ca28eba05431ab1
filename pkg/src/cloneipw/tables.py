"""Delimited table reading/writing with a stable canonical format.

Every table written by this package starts with a schema comment line
(``# columns: a,b,c``) followed by a header row.  Numbers are formatted
with :func:`fmt` so that re-emitting an ingested table is byte-identical,
which the run manifest relies on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

from .errors import DataError


def fmt(value) -> str:
    """Canonical string form of a cell value.

    Missing values (None or NaN) become the empty string; floats use
    repr-quality shortest form via %.12g; ints stay ints.
    """
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return format(value, ".12g")
    if isinstance(value, bool):
        return str(int(value))
    return str(value)


def write_table(path, columns, rows, delimiter: str = ",") -> None:
    """Write rows (iterable of sequences) with a schema comment header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# columns: " + ",".join(columns) + "\n")
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_table(path, delimiter: str = ",") -> tuple[list[str], list[list[str]]]:
    """Read a delimited table, skipping comment lines; returns (header, rows)."""
    path = Path(path)
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(io.StringIO("".join(lines)), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty table") from None
    return header, [row for row in reader]


def parse_float(cell: str, *, where: str = "") -> float | None:
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"unparseable number {cell!r} {where}".strip()) from None


def parse_int(cell: str, *, where: str = "") -> int | None:
    if cell == "":
        return None
    try:
        return int(cell)
    except ValueError:
        raise DataError(f"unparseable integer {cell!r} {where}".strip()) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(path, entries: dict) -> None:
    """Write a deterministic JSON manifest (sorted keys, no timestamps)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
