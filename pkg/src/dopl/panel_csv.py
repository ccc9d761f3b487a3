"""Long-format CSV ingestion for balanced panels.

Layout: header ``unit,period,y,x1,...,xK``.  One row per unit and period
``0..T``; the period-0 row carries the initial condition and its covariate
cells are ignored (they may be empty).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict

import numpy as np

from .errors import DataError
from .model import PanelDataset

__all__ = ["DataError", "read_panel_csv", "write_panel_csv"]


def _parse_int(text, what, line):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{what} must be an integer, got {text!r}", line) from None


def read_panel_csv(path, Q: int | None = None) -> PanelDataset:
    """Read a balanced panel from ``path``.

    ``Q`` defaults to the largest observed outcome level.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", 1) from None
        header = [h.strip() for h in header]
        if header[:3] != ["unit", "period", "y"]:
            raise DataError("header must start with unit,period,y", 1)
        xcols = header[3:]
        K = len(xcols)
        if K == 0 or xcols != [f"x{k + 1}" for k in range(K)]:
            raise DataError("covariate columns must be named x1..xK", 1)

        units: dict[str, dict[int, tuple]] = defaultdict(dict)
        order: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3 + K:
                raise DataError(f"expected {3 + K} fields, got {len(row)}", lineno)
            unit = row[0].strip()
            if not unit:
                raise DataError("empty unit id", lineno)
            period = _parse_int(row[1].strip(), "period", lineno)
            if period < 0:
                raise DataError("period must be >= 0", lineno)
            level = _parse_int(row[2].strip(), "y", lineno)
            if level < 1:
                raise DataError(f"y must be >= 1, got {level}", lineno)
            if Q is not None and level > Q:
                raise DataError(f"y must be <= Q={Q}, got {level}", lineno)
            xs = None
            if period > 0:
                try:
                    xs = [float(c) for c in row[3:]]
                except ValueError:
                    raise DataError("covariates must be numeric", lineno) from None
                if not all(math.isfinite(v) for v in xs):
                    raise DataError("covariates must be finite", lineno)
            if period in units[unit]:
                raise DataError(f"duplicate period {period} for unit {unit}", lineno)
            if unit not in units or not units[unit]:
                order.append(unit)
            units[unit][period] = (level, xs, lineno)

    if not order:
        raise DataError("no data rows", 2)
    T = None
    for unit in order:
        periods = units[unit]
        top = max(periods)
        if sorted(periods) != list(range(top + 1)):
            first = min(v[2] for v in periods.values())
            raise DataError(f"unit {unit} does not cover periods 0..{top} exactly once", first)
        if T is None:
            T = top
        elif top != T:
            first = min(v[2] for v in periods.values())
            raise DataError(f"unbalanced panel: unit {unit} has T={top}, expected {T}", first)
    if T < 1:
        raise DataError("panel needs at least one period after the initial condition")

    n = len(order)
    y0 = np.empty(n, dtype=int)
    y = np.empty((n, T), dtype=int)
    x = np.empty((n, T, K))
    for i, unit in enumerate(order):
        periods = units[unit]
        y0[i] = periods[0][0]
        for t in range(1, T + 1):
            y[i, t - 1] = periods[t][0]
            x[i, t - 1] = periods[t][1]
    if Q is None:
        Q = int(max(y0.max(), y.max()))
        if Q < 2:
            raise DataError("outcome takes a single level; cannot infer Q >= 2")
    return PanelDataset(y0, y, x, Q)


def write_panel_csv(dataset: PanelDataset, path, x0=None) -> None:
    """Write ``dataset`` in long format.  ``x0`` (n, K) fills period-0 covariates."""
    K = dataset.K
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit", "period", "y"] + [f"x{k + 1}" for k in range(K)])
        for i in range(dataset.n):
            init = [""] * K if x0 is None else [repr(float(v)) for v in x0[i]]
            writer.writerow([i + 1, 0, int(dataset.y0[i])] + init)
            for t in range(dataset.T):
                writer.writerow(
                    [i + 1, t + 1, int(dataset.y[i, t])] + [repr(float(v)) for v in dataset.x[i, t]]
                )
