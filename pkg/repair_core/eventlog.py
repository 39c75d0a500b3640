"""
Event-log ingestion and emission.

CSV in, CSV out: rows are grouped by case id (first-seen order), events are
sorted by timestamp (stable), and empty strings or the missing token become
MISSING cells.
"""
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from models import (
    MISSING,
    Attribute,
    AttributeKind,
    AttributeSchema,
    AttributeScope,
    Cell,
    Event,
    EventLog,
    Trace,
    epoch_seconds,
    format_number,
    format_timestamp,
    is_missing,
    parse_timestamp,
)
from .errors import EmptyLog, IoFailure, MissingColumn, UnparsableTimestamp, UnparsableValue, validate_ratios

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsvOptions:
    missing_token: str = "-"


@dataclass(frozen=True)
class SchemaHints:
    case_id_column: str = "case_id"
    activity_column: str = "activity"
    timestamp_column: str = "timestamp"
    categorical: Tuple[str, ...] = ()
    numeric: Tuple[str, ...] = ()
    timestamp: Tuple[str, ...] = ()


def _read_frame(source) -> pd.DataFrame:
    try:
        return pd.read_csv(source, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyLog("the log has no header row")
    except (OSError, UnicodeDecodeError) as e:
        raise IoFailure(f"cannot read log: {e}")


def _convert(raw: str, attr: Attribute, row: int, token: str) -> Cell:
    if raw == "" or raw == token:
        return MISSING
    if attr.kind is AttributeKind.CATEGORICAL:
        return raw
    if attr.kind is AttributeKind.NUMERIC:
        try:
            x = float(raw)
        except ValueError:
            raise UnparsableValue(row, attr.name, raw)
        if not math.isfinite(x):
            raise UnparsableValue(row, attr.name, raw)
        return x
    return parse_timestamp(raw, row, attr.name)


def _sort_key(events: List[Event], ts_col: str) -> List[float]:
    # Missing timestamps inherit the previous present one so they keep their place
    stamps = [e.values[ts_col] for e in events]
    present = [epoch_seconds(s) for s in stamps if not is_missing(s)]
    carry = present[0] if present else 0.0
    keys = []
    for s in stamps:
        if not is_missing(s):
            carry = epoch_seconds(s)
        keys.append(carry)
    return keys


def parse_csv_log(source, schema: AttributeSchema, options: CsvOptions = CsvOptions()) -> EventLog:
    frame = _read_frame(source)
    for col in schema.columns:
        if col not in frame.columns:
            raise MissingColumn(col)
    if frame.empty:
        raise EmptyLog("the log has a header but no events")

    attrs = schema.attributes
    token = options.missing_token
    grouped: Dict[str, List[Event]] = {}
    values = frame[list(schema.columns)].to_numpy()
    for i, row in enumerate(values, start=1):
        case_id = str(row[0]).strip()
        if not case_id:
            raise MissingColumn(f"{schema.case_id_column} (empty at row {i})")
        cells = {a.name: _convert(str(raw), a, i, token) for a, raw in zip(attrs, row[1:])}
        grouped.setdefault(case_id, []).append(Event(cells))

    traces = []
    for case_id, events in grouped.items():
        keys = _sort_key(events, schema.timestamp_column)
        order = sorted(range(len(events)), key=lambda k: keys[k])
        traces.append(Trace(case_id, [events[k] for k in order]))

    log.debug("parsed %d traces, %d events", len(traces), len(frame))
    return EventLog(schema, traces).validate()


def _render(cell: Cell, token: str) -> str:
    if is_missing(cell):
        return token
    if isinstance(cell, str):
        return cell
    if isinstance(cell, float | int):
        return format_number(cell)
    return format_timestamp(cell)


def log_to_frame(log_: EventLog, options: CsvOptions = CsvOptions()) -> pd.DataFrame:
    token = options.missing_token
    names = log_.schema.names
    rows = [
        [t.case_id] + [_render(e.values[n], token) for n in names]
        for t in log_.traces
        for e in t.events
    ]
    return pd.DataFrame(rows, columns=list(log_.schema.columns), dtype=str)


def write_csv_log(log_: EventLog, sink, options: CsvOptions = CsvOptions()) -> None:
    frame = log_to_frame(log_, options)
    try:
        if isinstance(sink, io.TextIOBase):
            frame.to_csv(sink, index=False, lineterminator="\n")
        else:
            frame.to_csv(sink, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write log: {e}")


def split_log(log_: EventLog, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 123) -> Tuple[EventLog, EventLog, EventLog]:
    """Trace-level split: seeded shuffle, then contiguous partition; remainder goes to train."""
    _, r_val, r_test = validate_ratios(ratios)
    n = len(log_.traces)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * r_val + 1e-9)
    n_test = math.floor(n * r_test + 1e-9)
    n_train = n - n_val - n_test
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(
        log_.with_traces([log_.traces[i] for i in idx], provenance=name)
        for name, idx in zip(("train", "val", "test"), parts)
    )


def _all_parse(values: List[str], parser) -> bool:
    for v in values:
        try:
            parser(v)
        except Exception:
            return False
    return True


def _finite_float(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError(v)
    return x


def infer_schema(source, hints: SchemaHints = SchemaHints(), options: CsvOptions = CsvOptions()) -> AttributeSchema:
    frame = _read_frame(source)
    for col in (hints.case_id_column, hints.activity_column, hints.timestamp_column):
        if col not in frame.columns:
            raise MissingColumn(col)

    token = options.missing_token
    cases = frame[hints.case_id_column].to_numpy()
    attributes = []
    for col in frame.columns:
        if col == hints.case_id_column:
            continue
        column = frame[col].to_numpy()
        present = [(c, v) for c, v in zip(cases, column) if v != "" and v != token]
        values = [v for _, v in present]

        if col == hints.activity_column or col in hints.categorical:
            kind = AttributeKind.CATEGORICAL
        elif col == hints.timestamp_column or col in hints.timestamp:
            kind = AttributeKind.TIMESTAMP
        elif col in hints.numeric:
            kind = AttributeKind.NUMERIC
        elif values and _all_parse(values, _finite_float):
            kind = AttributeKind.NUMERIC
        elif values and _all_parse(values, parse_timestamp):
            kind = AttributeKind.TIMESTAMP
        else:
            kind = AttributeKind.CATEGORICAL

        if col in (hints.activity_column, hints.timestamp_column):
            scope = AttributeScope.EVENT
        else:
            per_case: Dict[str, set] = {}
            for c, v in present:
                per_case.setdefault(c, set()).add(v)
            constant = all(len(vs) == 1 for vs in per_case.values())
            scope = AttributeScope.TRACE if constant else AttributeScope.EVENT
        attributes.append(Attribute(col, kind, scope))

    return AttributeSchema(
        attributes=tuple(attributes),
        case_id_column=hints.case_id_column,
        activity_column=hints.activity_column,
        timestamp_column=hints.timestamp_column,
    )


def repair_schema(source, model_schema: AttributeSchema, options: CsvOptions = CsvOptions()) -> AttributeSchema:
    """Every column of a log to repair.

    The model's attributes are typed as the model saw them; any other column is
    read as plain text so it is written back unchanged.
    """
    hints = SchemaHints(
        case_id_column=model_schema.case_id_column,
        activity_column=model_schema.activity_column,
        timestamp_column=model_schema.timestamp_column,
        categorical=tuple(a.name for a in model_schema.attributes if a.kind is AttributeKind.CATEGORICAL),
        numeric=tuple(a.name for a in model_schema.attributes if a.kind is AttributeKind.NUMERIC),
        timestamp=tuple(a.name for a in model_schema.attributes if a.kind is AttributeKind.TIMESTAMP),
    )
    inferred = infer_schema(source, hints, options)
    for name in model_schema.names:
        if name not in inferred.names:
            raise MissingColumn(name)
    known = set(model_schema.names)
    return AttributeSchema(
        attributes=tuple(
            model_schema.get(a.name) if a.name in known
            else Attribute(a.name, AttributeKind.CATEGORICAL, AttributeScope.EVENT)
            for a in inferred.attributes
        ),
        case_id_column=model_schema.case_id_column,
        activity_column=model_schema.activity_column,
        timestamp_column=model_schema.timestamp_column,
    )
