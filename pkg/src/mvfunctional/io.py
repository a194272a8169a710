"""CSV ingestion and 17-significant-digit JSON output."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math

import numpy as np

from .moments import DataError, as_dataset
from .portfolio import ReturnsTable

MARKET_COLUMN = "MARKET"


class ParseError(DataError):
    """Malformed CSV input; ``row`` and ``column`` are 1-based file positions."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


def _parse_float(text: str, row: int, col: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text.strip()!r}", row, col) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text.strip()!r}", row, col)
    return v


def _rows(path):
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh), start=1):
            if rec and any(c.strip() for c in rec):
                yield i, rec


def read_dataset_csv(path, header: bool = False) -> np.ndarray:
    """One observation per row, comma separated; an optional header row is skipped."""
    out = []
    width = None
    for i, rec in _rows(path):
        if header and width is None and not out:
            width = len(rec)
            continue
        if width is None:
            width = len(rec)
        if len(rec) != width:
            raise ParseError(f"expected {width} fields, found {len(rec)}", i)
        out.append([_parse_float(c, i, j) for j, c in enumerate(rec, start=1)])
    if not out:
        raise DataError(f"{path}: no data rows")
    return as_dataset(out)


def write_dataset_csv(data, path) -> None:
    x = as_dataset(data)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in x:
            w.writerow([f"{v:.17g}" for v in row])


def read_returns_csv(path) -> ReturnsTable:
    """Header ``date, <tickers...>, MARKET`` (MARKET may sit anywhere after date)."""
    rows = list(_rows(path))
    if not rows:
        raise DataError(f"{path}: empty file")
    _, head = rows[0]
    head = [h.strip() for h in head]
    if MARKET_COLUMN not in head[1:]:
        raise ParseError(f"missing required column {MARKET_COLUMN!r}", 1)
    mcol = head.index(MARKET_COLUMN, 1)
    tickers = [h for j, h in enumerate(head) if j not in (0, mcol)]
    dates, rets, market = [], [], []
    for i, rec in rows[1:]:
        if len(rec) != len(head):
            raise ParseError(f"expected {len(head)} fields, found {len(rec)}", i)
        try:
            d = dt.date.fromisoformat(rec[0].strip())
        except ValueError:
            raise ParseError(f"bad ISO-8601 date {rec[0].strip()!r}", i, 1) from None
        if dates and d <= dates[-1]:
            raise ParseError("dates must be strictly increasing", i, 1)
        vals = [_parse_float(c, i, j) for j, c in enumerate(rec, start=1) if j > 1]
        market.append(vals[mcol - 1])
        rets.append([v for j, v in enumerate(vals, start=1) if j != mcol])
        dates.append(d)
    if not dates:
        raise DataError(f"{path}: no data rows")
    return ReturnsTable([d.isoformat() for d in dates], tickers, np.array(rets).reshape(len(dates), len(tickers)),
                        market)


def write_returns_csv(table: ReturnsTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *table.tickers, MARKET_COLUMN])
        for d, r, m in zip(table.dates, table.excess_returns, table.market):
            w.writerow([d, *(f"{v:.17g}" for v in r), f"{m:.17g}"])


def _plain(obj):
    """Recursively convert numpy containers/scalars to JSON-ready Python values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(obj, depth: int) -> str:
    pad = "  " * (depth + 1)
    end = "  " * depth
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(obj[k], depth + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _encode(v, depth + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, float):
        return f"{obj:.17g}" if math.isfinite(obj) else "null"
    return json.dumps(obj)


def dumps(obj) -> str:
    """JSON text with sorted keys and every float written to 17 significant digits.

    Non-finite floats become null.
    """
    return _encode(_plain(obj), 0) + "\n"


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj))
