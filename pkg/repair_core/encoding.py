"""
Attribute encoders fitted on the training split.

Categorical attributes: one-hot over the first-seen vocabulary with a
reserved final "MISSING VALUE" class; unseen values fall into that class.
Numeric attributes: log1p of the value. Timestamp attributes: log1p of the
seconds elapsed since the trace origin. Missing numerics encode as -1.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from models import AttributeKind, AttributeSchema, Cell, EventLog, Trace, epoch_seconds, is_missing, parse_timestamp
from .errors import ArtifactFormatError, NegativeDerivedValue, SchemaMismatch
from .io_utils import write_json

MISSING_VALUE = "MISSING VALUE"
MISSING_NUMERIC = -1.0
# about a century in seconds; keeps expm1 and datetime arithmetic in range
MAX_ENCODED = math.log1p(100 * 365 * 86400.0)
PREDICTION_MARGIN = math.log(10.0)
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NumericTransform:
    source: str  # "value" or "elapsed"
    kind: str = "log1p"
    min: float | None = None
    max: float | None = None
    # earliest training value, fallback origin for traces with no visible timestamp
    reference: str | None = None

    def forward(self, derived: float) -> float:
        return math.log1p(derived)

    def inverse(self, encoded: float) -> float:
        return max(0.0, math.expm1(min(encoded, MAX_ENCODED)))

    def clip(self, encoded: float) -> float:
        """Bound a prediction to ten times the largest training value."""
        ceiling = MAX_ENCODED if self.max is None else min(MAX_ENCODED, self.max + PREDICTION_MARGIN)
        return min(max(encoded, 0.0), ceiling)


@dataclass
class EncoderSet:
    schema: AttributeSchema
    vocabularies: Dict[str, List[str]] = field(default_factory=dict)
    transforms: Dict[str, NumericTransform] = field(default_factory=dict)

    def __post_init__(self):
        self._lookup = {a: {v: i for i, v in enumerate(vocab)} for a, vocab in self.vocabularies.items()}

    def is_categorical(self, attr: str) -> bool:
        return attr in self.vocabularies

    def width(self, attr: str) -> int:
        if attr in self.vocabularies:
            return len(self.vocabularies[attr])
        if attr in self.transforms:
            return 1
        raise SchemaMismatch(f"no encoder for attribute {attr!r}")

    def missing_index(self, attr: str) -> int:
        return len(self.vocabularies[attr]) - 1

    def class_index(self, attr: str, value: Cell) -> int:
        if is_missing(value):
            return self.missing_index(attr)
        return self._lookup[attr].get(value, self.missing_index(attr))

    def decode(self, attr: str, index: int) -> str:
        return self.vocabularies[attr][index]

    def reference_time(self, attr: str) -> datetime | None:
        ref = self.transforms[attr].reference
        return parse_timestamp(ref) if ref else None

    def widths(self) -> Dict[str, int]:
        return {a: self.width(a) for a in self.schema.names}

    def schema_hash(self) -> bytes:
        doc = {"schema": self.schema.to_dict(), "widths": self.widths()}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).digest()

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "schema": self.schema.to_dict(),
            "vocabularies": self.vocabularies,
            "transforms": {
                a: {"kind": t.kind, "source": t.source, "min": t.min, "max": t.max, "reference": t.reference}
                for a, t in self.transforms.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderSet":
        try:
            if data.get("version") != FORMAT_VERSION:
                raise ArtifactFormatError(f"unsupported encoder format version {data.get('version')!r}")
            schema = AttributeSchema.from_dict(data["schema"])
            vocabularies = {a: list(v) for a, v in data["vocabularies"].items()}
            transforms = {
                a: NumericTransform(source=t["source"], kind=t.get("kind", "log1p"), min=t.get("min"),
                                    max=t.get("max"), reference=t.get("reference"))
                for a, t in data["transforms"].items()
            }
        except (KeyError, TypeError, AttributeError) as e:
            raise ArtifactFormatError(f"invalid encoder document: {e}")
        for vocab in vocabularies.values():
            if not vocab or vocab[-1] != MISSING_VALUE or vocab.count(MISSING_VALUE) != 1:
                raise ArtifactFormatError("every vocabulary must end with the MISSING VALUE class")
        return cls(schema, vocabularies, transforms)

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "EncoderSet":
        from .config import read_json_file
        return cls.from_dict(read_json_file(path))


def trace_origin(cells: Sequence[Cell], visible: Iterable[bool] | None = None) -> datetime | None:
    """Earliest present (and visible) timestamp of one attribute in a trace."""
    flags = visible if visible is not None else [True] * len(cells)
    stamps = [c for c, v in zip(cells, flags) if v and not is_missing(c)]
    return min(stamps, key=epoch_seconds) if stamps else None


def derive_value(cell: Cell, kind: AttributeKind, origin: datetime | None = None) -> float:
    """Non-negative representation fed to log1p."""
    if kind is AttributeKind.TIMESTAMP:
        if origin is None:
            raise NegativeDerivedValue("timestamp has no origin to measure elapsed time from")
        derived = epoch_seconds(cell) - epoch_seconds(origin)
    else:
        derived = float(cell)
    if derived < 0:
        raise NegativeDerivedValue(f"derived value {derived!r} is negative")
    return derived


def fit_encoders(train: EventLog) -> EncoderSet:
    schema = train.schema
    vocabularies: Dict[str, List[str]] = {}
    transforms: Dict[str, NumericTransform] = {}
    for attr in schema.attributes:
        if attr.kind is AttributeKind.CATEGORICAL:
            seen: Dict[str, None] = {}
            for t in train.traces:
                for cell in t.column(attr.name):
                    if not is_missing(cell) and cell != MISSING_VALUE:
                        seen.setdefault(cell, None)
            vocabularies[attr.name] = list(seen) + [MISSING_VALUE]
            continue

        encoded = []
        reference = None
        for t in train.traces:
            cells = t.column(attr.name)
            origin = trace_origin(cells) if attr.kind is AttributeKind.TIMESTAMP else None
            if origin is not None and (reference is None or epoch_seconds(origin) < epoch_seconds(reference)):
                reference = origin
            for cell in cells:
                if not is_missing(cell):
                    encoded.append(math.log1p(derive_value(cell, attr.kind, origin)))
        transforms[attr.name] = NumericTransform(
            source="elapsed" if attr.kind is AttributeKind.TIMESTAMP else "value",
            min=min(encoded) if encoded else None,
            max=max(encoded) if encoded else None,
            reference=reference.isoformat() if reference is not None else None,
        )
    return EncoderSet(schema, vocabularies, transforms)


def encode_value(cell: Cell, attr: str, enc: EncoderSet, origin: datetime | None = None) -> np.ndarray:
    if enc.is_categorical(attr):
        row = np.zeros(enc.width(attr))
        row[enc.class_index(attr, cell)] = 1.0
        return row
    if is_missing(cell):
        return np.array([MISSING_NUMERIC])
    kind = enc.schema.get(attr).kind
    return np.array([enc.transforms[attr].forward(derive_value(cell, kind, origin))])
