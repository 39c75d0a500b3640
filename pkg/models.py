from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Tuple, Union

from repair_core.errors import InconsistentTrace, InvalidFlag, SchemaMismatch, UnparsableTimestamp


class _Missing:
    """Marker for an absent cell. Singleton, falsy, never equal to a real value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()

Value = Union[str, float, datetime]
Cell = Union[Value, _Missing]


def is_missing(cell: object) -> bool:
    return cell is MISSING


class AttributeKind(str, Enum):
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"
    TIMESTAMP = "timestamp"


class AttributeScope(str, Enum):
    EVENT = "event"
    TRACE = "trace"


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: AttributeKind
    scope: AttributeScope = AttributeScope.EVENT

    @property
    def is_categorical(self) -> bool:
        return self.kind is AttributeKind.CATEGORICAL


@dataclass(frozen=True)
class AttributeSchema:
    attributes: Tuple[Attribute, ...]
    case_id_column: str
    activity_column: str
    timestamp_column: str

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaMismatch("attribute names must be unique")
        if self.case_id_column in names:
            raise SchemaMismatch("the case id column is not an attribute")
        by_name = {a.name: a for a in self.attributes}
        act = by_name.get(self.activity_column)
        if act is None or act.kind is not AttributeKind.CATEGORICAL or act.scope is not AttributeScope.EVENT:
            raise SchemaMismatch(f"{self.activity_column!r} must be a categorical event attribute")
        ts = by_name.get(self.timestamp_column)
        if ts is None or ts.kind is not AttributeKind.TIMESTAMP or ts.scope is not AttributeScope.EVENT:
            raise SchemaMismatch(f"{self.timestamp_column!r} must be a timestamp event attribute")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def get(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaMismatch(f"unknown attribute {name!r}")

    @property
    def columns(self) -> Tuple[str, ...]:
        return (self.case_id_column,) + self.names

    def select(self, mode: str) -> "AttributeSchema":
        """`full` keeps everything, `at` keeps activity and timestamp only."""
        if mode == "full":
            return self
        if mode != "at":
            raise InvalidFlag("attributes mode must be 'full' or 'at'")
        keep = (self.activity_column, self.timestamp_column)
        return AttributeSchema(
            attributes=tuple(a for a in self.attributes if a.name in keep),
            case_id_column=self.case_id_column,
            activity_column=self.activity_column,
            timestamp_column=self.timestamp_column,
        )

    def to_dict(self) -> dict:
        return {
            "case_id_column": self.case_id_column,
            "activity_column": self.activity_column,
            "timestamp_column": self.timestamp_column,
            "attributes": [
                {"name": a.name, "kind": a.kind.value, "scope": a.scope.value} for a in self.attributes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttributeSchema":
        try:
            attrs = tuple(
                Attribute(a["name"], AttributeKind(a["kind"]), AttributeScope(a.get("scope", "event")))
                for a in data["attributes"]
            )
            return cls(attrs, data["case_id_column"], data["activity_column"], data["timestamp_column"])
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaMismatch(f"invalid schema document: {e}")


@dataclass
class Event:
    values: Dict[str, Cell]

    def __getitem__(self, name: str) -> Cell:
        return self.values[name]


@dataclass
class Trace:
    case_id: str
    events: List[Event]

    def __len__(self) -> int:
        return len(self.events)

    def column(self, name: str) -> List[Cell]:
        return [e.values[name] for e in self.events]


@dataclass
class EventLog:
    schema: AttributeSchema
    traces: List[Trace]
    # which split this log came from ("train" / "val" / "test"); not part of equality
    provenance: str | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)

    def validate(self) -> "EventLog":
        seen = set()
        names = set(self.schema.names)
        trace_scoped = [a.name for a in self.schema.attributes if a.scope is AttributeScope.TRACE]
        ts_col = self.schema.timestamp_column
        for t in self.traces:
            if t.case_id in seen:
                raise InconsistentTrace(f"case id {t.case_id!r} appears twice")
            seen.add(t.case_id)
            if not t.events:
                raise InconsistentTrace(f"trace {t.case_id!r} is empty")
            for e in t.events:
                if set(e.values) != names:
                    raise InconsistentTrace(f"trace {t.case_id!r}: event does not cover the schema")
            last = None
            for cell in t.column(ts_col):
                if is_missing(cell):
                    continue
                if last is not None and epoch_seconds(cell) < epoch_seconds(last):
                    raise InconsistentTrace(f"trace {t.case_id!r} is not ordered by timestamp")
                last = cell
            for name in trace_scoped:
                present = {v for v in t.column(name) if not is_missing(v)}
                if len(present) > 1:
                    raise InconsistentTrace(f"trace {t.case_id!r}: trace attribute {name!r} varies")
        return self

    def project(self, schema: AttributeSchema) -> "EventLog":
        """Keep only the columns of `schema` (a subset of this log's schema)."""
        missing = set(schema.names) - set(self.schema.names)
        if missing:
            raise SchemaMismatch(f"attributes not in log: {sorted(missing)}")
        traces = [
            Trace(t.case_id, [Event({n: e.values[n] for n in schema.names}) for e in t.events])
            for t in self.traces
        ]
        return EventLog(schema, traces, provenance=self.provenance)

    def with_traces(self, traces: Iterable[Trace], provenance: str | None = None) -> "EventLog":
        return EventLog(self.schema, list(traces), provenance=provenance or self.provenance)


# value helpers

def parse_timestamp(value: str, row: int = 0, column: str | None = None) -> datetime:
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise UnparsableTimestamp(row, value, column)


def format_timestamp(ts: datetime) -> str:
    return ts.isoformat(sep=" ")


def epoch_seconds(ts: datetime) -> float:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


def format_number(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))
