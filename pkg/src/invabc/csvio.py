"""CSV helpers shared by every stage. Floats are written with ``repr`` so they round-trip exactly."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def read_matrix(path, skip_cols: int = 0) -> tuple[list[str], np.ndarray]:
    header, rows = read_table(path)
    if not rows:
        return header, np.zeros((0, len(header) - skip_cols))
    return header, np.array([[float(v) for v in r[skip_cols:]] for r in rows])
