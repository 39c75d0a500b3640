import math
from functools import wraps
from typing import Any, Dict, Iterable, Tuple

import click


# Error types

class RepairError(Exception):
    """Base error. `status` doubles as the CLI exit code."""

    status = 2
    code = "RUNTIME_ERROR"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": {
                "status": self.status,
                "code": self.code,
                "message": self.message,
                **self.details,
            }
        }


class ValidationError(RepairError):
    status = 1
    code = "VALIDATION_ERROR"


class MissingColumn(ValidationError):
    code = "MISSING_COLUMN"

    def __init__(self, name: str):
        super().__init__(f"column {name!r} is missing", column=name)
        self.name = name


class UnparsableTimestamp(ValidationError):
    code = "UNPARSABLE_TIMESTAMP"

    def __init__(self, row: int, value: str, column: str | None = None):
        super().__init__(f"row {row}: cannot parse timestamp {value!r}", row=row, column=column)
        self.row = row


class UnparsableValue(ValidationError):
    code = "UNPARSABLE_VALUE"

    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}: {column} value {value!r} is not a finite number", row=row, column=column)
        self.row = row


class EmptyLog(ValidationError):
    code = "EMPTY_LOG"


class InconsistentTrace(ValidationError):
    code = "INCONSISTENT_TRACE"


class InvalidRatios(ValidationError):
    code = "INVALID_RATIOS"


class InvalidProbabilities(ValidationError):
    code = "INVALID_PROBABILITIES"


class UnreachableEnd(ValidationError):
    code = "UNREACHABLE_END"


class InvalidProcessSpec(ValidationError):
    code = "INVALID_PROCESS_SPEC"


class NegativeDerivedValue(ValidationError):
    code = "NEGATIVE_DERIVED_VALUE"


class LengthMismatch(ValidationError):
    code = "LENGTH_MISMATCH"


class SchemaMismatch(ValidationError):
    code = "SCHEMA_MISMATCH"


class InvalidFlag(ValidationError):
    code = "INVALID_FLAG"


class ArtifactFormatError(ValidationError):
    code = "ARTIFACT_FORMAT_ERROR"


class ProvenanceError(ValidationError):
    code = "PROVENANCE_ERROR"


class ShapeMismatch(RepairError):
    code = "SHAPE_MISMATCH"


class IndexOutOfRange(RepairError):
    code = "INDEX_OUT_OF_RANGE"


class NumericalError(RepairError):
    code = "NUMERICAL_ERROR"


class NonFiniteLoss(RepairError):
    code = "NON_FINITE_LOSS"


class EmptyEvaluationSet(RepairError):
    code = "EMPTY_EVALUATION_SET"


class IoFailure(RepairError):
    code = "IO_FAILURE"


# validators and helpers

AGGREGATORS = ("sum", "mean", "max")


def validate_ratios(ratios: Iterable[float]) -> Tuple[float, float, float]:
    try:
        values = tuple(float(r) for r in ratios)
    except (TypeError, ValueError):
        raise InvalidRatios("ratios must be numbers")
    if len(values) != 3:
        raise InvalidRatios("ratios must be (train, val, test)")
    if any(not (r > 0) for r in values):
        raise InvalidRatios("ratios must all be positive")
    if abs(sum(values) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must sum to 1, got {sum(values)!r}")
    return values


def parse_probability(v: Any, name: str = "p") -> float:
    try:
        p = float(v)
    except (TypeError, ValueError):
        raise InvalidFlag(f"{name} must be a number in (0, 1)")
    if not (0.0 < p < 1.0):
        raise InvalidFlag(f"{name} must be strictly between 0 and 1")
    return p


def parse_positive_int(v: Any, name: str) -> int:
    try:
        n = int(v)
    except (TypeError, ValueError):
        raise InvalidFlag(f"{name} must be an integer")
    if n < 1:
        raise InvalidFlag(f"{name} must be ≥ 1")
    return n


def parse_positive_float(v: Any, name: str, allow_zero: bool = False) -> float:
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise InvalidFlag(f"{name} must be a number")
    if not math.isfinite(x) or x < 0 or (x == 0 and not allow_zero):
        raise InvalidFlag(f"{name} must be {'non-negative' if allow_zero else 'positive'}")
    return x


def validate_aggregator(v: Any) -> str:
    name = (v or "").strip().lower() if isinstance(v, str) else v
    if name not in AGGREGATORS:
        raise InvalidFlag(f"aggregator must be one of {list(AGGREGATORS)}")
    return name


def parse_bool(v: Any, name: str = "flag") -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str):
        s = v.strip().lower()
        if s in {"true", "1", "yes", "on"}: return True
        if s in {"false", "0", "no", "off"}: return False
    raise InvalidFlag(f"{name} must be boolean")


# CLI error decorator

def handle_errors(fn):
    """
    Render RepairError as the JSON error envelope on stderr and exit with
    its status. Anything unexpected becomes INTERNAL_ERROR (status 2).
    """
    from . import metrics

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RepairError as e:
            metrics.ERROR_COUNT.labels(e.code).inc()
            click.echo(_dump(e.to_dict()), err=True)
            raise click.exceptions.Exit(e.status)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except Exception as e:
            metrics.ERROR_COUNT.labels("INTERNAL_ERROR").inc()
            payload = {"error": {"status": 2, "code": "INTERNAL_ERROR", "message": str(e) or type(e).__name__}}
            click.echo(_dump(payload), err=True)
            raise click.exceptions.Exit(2)
    return wrapper


def _dump(payload: Dict[str, Any]) -> str:
    import json
    return json.dumps(payload, ensure_ascii=False, default=str)
