"""Importance-trace records and their CSV/JSON round trip.

One trace row is emitted per (epoch, group): the schedule coefficient in
force, the raw and smoothed importance metrics from the epoch's final
iteration, the group's L1 norm after the epoch's updates, and the epoch-end
losses. Floats are written with repr-faithful precision so a written trace
reloads to bitwise-identical values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from ..errors import DataFormatError

TRACE_FIELDS = ("epoch", "group_id", "kind", "lambda", "raw_grad", "ema_grad",
                "raw_fisher", "ema_fisher", "raw_bayes", "ema_bayes",
                "l1_norm", "task_loss", "total_loss")

_FLOAT_FIELDS = TRACE_FIELDS[3:]


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    group_id: str
    kind: str
    lambda_: float
    raw_grad: float
    ema_grad: float
    raw_fisher: float
    ema_fisher: float
    raw_bayes: float
    ema_bayes: float
    l1_norm: float
    task_loss: float
    total_loss: float

    def as_row(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lambda_")
        return doc


def _record_from_row(row: dict) -> TraceRecord:
    try:
        return TraceRecord(
            epoch=int(row["epoch"]),
            group_id=str(row["group_id"]),
            kind=str(row["kind"]),
            lambda_=float(row["lambda"]),
            **{name: float(row[name]) for name in _FLOAT_FIELDS[1:]})
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"malformed trace row {row!r}: {exc}") from exc


def emit_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    """Write records as ``.csv`` or ``.json``, chosen by file extension."""
    path = Path(path)
    records = list(records)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_FIELDS)
            for rec in records:
                row = rec.as_row()
                writer.writerow(
                    [row["epoch"], row["group_id"], row["kind"]]
                    + [format(row[name], ".17g") for name in _FLOAT_FIELDS])
    elif path.suffix == ".json":
        path.write_text(json.dumps([rec.as_row() for rec in records], indent=2))
    else:
        raise DataFormatError(
            f"trace path {path} must end in .csv or .json")


def read_trace(path: str | Path) -> list[TraceRecord]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"trace file {path} does not exist")
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != TRACE_FIELDS:
                raise DataFormatError(
                    f"trace {path} has header {reader.fieldnames}, "
                    f"expected {list(TRACE_FIELDS)}")
            return [_record_from_row(row) for row in reader]
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"trace {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, list):
            raise DataFormatError(f"trace {path} must hold a JSON array")
        return [_record_from_row(row) for row in doc]
    raise DataFormatError(f"trace path {path} must end in .csv or .json")


def validate_trace(records: list[TraceRecord]) -> list[str]:
    """Structural checks; returns human-readable problems (empty = clean)."""
    problems: list[str] = []
    if not records:
        return ["trace is empty"]
    epochs = sorted({rec.epoch for rec in records})
    if epochs[0] != 1:
        problems.append(f"epochs start at {epochs[0]}, expected 1")
    if epochs != list(range(epochs[0], epochs[0] + len(epochs))):
        problems.append("epoch numbers are not contiguous")
    seen: set[tuple[int, str]] = set()
    for rec in records:
        key = (rec.epoch, rec.group_id)
        if key in seen:
            problems.append(f"duplicate row for epoch {rec.epoch}, "
                            f"group {rec.group_id}")
        seen.add(key)
    groups_by_epoch = {}
    for rec in records:
        groups_by_epoch.setdefault(rec.epoch, set()).add(rec.group_id)
    group_sets = {frozenset(g) for g in groups_by_epoch.values()}
    if len(group_sets) > 1:
        problems.append("epochs disagree on the set of groups")
    return problems


def group_order(records: list[TraceRecord]) -> list[str]:
    """Group ids in their first-epoch row order."""
    if not records:
        raise DataFormatError("trace is empty")
    first = min(rec.epoch for rec in records)
    return [rec.group_id for rec in records if rec.epoch == first]
