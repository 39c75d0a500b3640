import os, sys
from datetime import datetime, timedelta, timezone

import pytest

# allow importing the top-level modules
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, ROOT)

from models import MISSING, Attribute, AttributeKind, AttributeSchema, Event, EventLog, Trace

T0 = datetime(2024, 1, 1, 9, 0, tzinfo=timezone.utc)
SPECS = os.path.join(ROOT, "specs")


def make_schema(*extra):
    """activity + timestamp + extra (name, kind) pairs."""
    attrs = [Attribute("activity", AttributeKind.CATEGORICAL), Attribute("timestamp", AttributeKind.TIMESTAMP)]
    attrs += [Attribute(name, kind) for name, kind in extra]
    return AttributeSchema(tuple(attrs), "case_id", "activity", "timestamp")


def make_trace(case_id, rows, names=("activity", "timestamp", "resource")):
    # rows: tuples aligned with names; an int timestamp means minutes after T0, None means missing
    events = []
    for row in rows:
        values = {}
        for name, v in zip(names, row):
            if v is None:
                values[name] = MISSING
            elif name == "timestamp":
                values[name] = T0 + timedelta(minutes=v)
            else:
                values[name] = v
        events.append(Event(values))
    return Trace(case_id, events)


@pytest.fixture()
def schema3():
    return make_schema(("resource", AttributeKind.CATEGORICAL))


@pytest.fixture()
def small_log(schema3):
    traces = [
        make_trace("c1", [("A", 0, "r1"), ("B", 10, "r2"), ("C", 20, "r1")]),
        make_trace("c2", [("A", 0, "r1"), ("C", 5, "r3")]),
        make_trace("c3", [("A", 0, "r2"), ("B", 30, "r2"), ("B", 45, "r1"), ("C", 60, "r3"), ("C", 61, "r1")]),
    ]
    return EventLog(schema3, traces, provenance="train").validate()


@pytest.fixture()
def deterministic_spec():
    from repair_core.synthetic import load_process_spec
    return load_process_spec(os.path.join(SPECS, "deterministic.json"))


def numeric_grad(loss_fn, p, h=1e-6):
    """Central differences of a scalar Tensor-valued loss_fn w.r.t. every entry of p."""
    import numpy as np
    g = np.zeros_like(p.data)
    for idx in np.ndindex(p.data.shape):
        old = p.data[idx]
        p.data[idx] = old + h
        up = loss_fn().item()
        p.data[idx] = old - h
        down = loss_fn().item()
        p.data[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g
