"""
Synthetic logs from a probabilistic control-flow graph.

A trace is a random walk start -> end. Each step waits a uniform integer
number of seconds drawn from the entered activity's duration range, so
timestamps strictly increase. Extra attributes are pure functions of
(activity, position).
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Dict, List, Tuple

import numpy as np

from models import Attribute, AttributeKind, AttributeSchema, AttributeScope, Event, EventLog, Trace
from .config import read_json_file
from .errors import InvalidProbabilities, InvalidProcessSpec, UnreachableEnd

log = logging.getLogger(__name__)

BASE_TIME = datetime(2020, 1, 1, tzinfo=timezone.utc)
DEFAULT_DURATION = (60, 3600)
RULE_KINDS = {"by_activity", "by_parity", "position", "constant"}
MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class AttributeRule:
    name: str
    kind: str
    values: Dict[str, Any] = field(default_factory=dict)
    even: Any = None
    odd: Any = None
    value: Any = None

    def __call__(self, activity: str, position: int):
        if self.kind == "by_activity":
            return self.values[activity]
        if self.kind == "by_parity":
            return self.even if position % 2 == 0 else self.odd
        if self.kind == "position":
            return float(position)
        return self.value

    def outputs(self) -> List[Any]:
        if self.kind == "by_activity":
            return list(self.values.values())
        if self.kind == "by_parity":
            return [self.even, self.odd]
        if self.kind == "constant":
            return [self.value]
        return [0.0]

    @property
    def attribute(self) -> Attribute:
        outs = self.outputs()
        numeric = self.kind == "position" or all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in outs)
        kind = AttributeKind.NUMERIC if numeric else AttributeKind.CATEGORICAL
        scope = AttributeScope.TRACE if self.kind == "constant" else AttributeScope.EVENT
        return Attribute(self.name, kind, scope)

    def render(self, activity: str, position: int):
        v = self(activity, position)
        if self.attribute.kind is AttributeKind.NUMERIC:
            return float(v)
        return str(v)


@dataclass(frozen=True)
class ProcessSpec:
    activities: Tuple[str, ...]
    edges: Dict[str, Tuple[Tuple[str, float], ...]]
    durations: Dict[str, Tuple[int, int]]
    attrs: Tuple[AttributeRule, ...] = ()
    start: str = ""
    end: str = ""
    max_steps: int = 100

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProcessSpec":
        try:
            activities = tuple(str(a) for a in data["activities"])
            if not activities:
                raise InvalidProcessSpec("activities must not be empty")
            edges: Dict[str, List[Tuple[str, float]]] = {}
            for e in data.get("edges", []):
                edges.setdefault(str(e["from"]), []).append((str(e["to"]), float(e["p"])))
            durations = {}
            for act, rng in (data.get("durations") or {}).items():
                lo, hi = int(rng[0]), int(rng[1])
                durations[str(act)] = (lo, hi)
            attrs = []
            for a in data.get("attrs", []):
                rule = a["rule"] if isinstance(a.get("rule"), dict) else {"kind": a.get("rule")}
                attrs.append(AttributeRule(
                    name=str(a["name"]),
                    kind=str(rule.get("kind")),
                    values={str(k): v for k, v in (rule.get("values") or {}).items()},
                    even=rule.get("even"),
                    odd=rule.get("odd"),
                    value=rule.get("value"),
                ))
            spec = cls(
                activities=activities,
                edges={k: tuple(v) for k, v in edges.items()},
                durations=durations,
                attrs=tuple(attrs),
                start=str(data.get("start") or activities[0]),
                end=str(data.get("end") or activities[-1]),
                max_steps=int(data.get("max_steps", 100)),
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise InvalidProcessSpec(f"invalid process spec: {e}")
        return spec.validate()

    def validate(self) -> "ProcessSpec":
        known = set(self.activities)
        for node in (self.start, self.end):
            if node not in known:
                raise InvalidProcessSpec(f"{node!r} is not a declared activity")
        for src, outs in self.edges.items():
            if src not in known or any(dst not in known for dst, _ in outs):
                raise InvalidProcessSpec(f"edge from {src!r} references an undeclared activity")
            if src == self.end:
                raise InvalidProcessSpec("the end activity cannot have outgoing edges")
            probs = [p for _, p in outs]
            if any(not (0.0 < p <= 1.0) for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise InvalidProbabilities(f"outgoing probabilities of {src!r} must be in (0, 1] and sum to 1")
        for act, (lo, hi) in self.durations.items():
            if act not in known or lo < 1 or hi < lo:
                raise InvalidProcessSpec(f"duration range of {act!r} must satisfy 1 ≤ lo ≤ hi")
        for rule in self.attrs:
            if rule.kind not in RULE_KINDS:
                raise InvalidProcessSpec(f"attribute {rule.name!r}: unknown rule kind {rule.kind!r}")
            if rule.kind == "by_activity" and set(rule.values) != known:
                raise InvalidProcessSpec(f"attribute {rule.name!r}: by_activity must map every activity")
        if self.max_steps < 1:
            raise InvalidProcessSpec("max_steps must be ≥ 1")
        try:
            self.schema()
        except Exception as e:
            raise InvalidProcessSpec(f"attribute names clash: {e}")

        # every node reachable from start must still be able to reach end
        reachable = _reach(self.start, lambda n: [d for d, _ in self.edges.get(n, ())])
        if self.end not in reachable:
            raise UnreachableEnd(f"{self.end!r} is not reachable from {self.start!r}")
        reverse: Dict[str, List[str]] = {}
        for src, outs in self.edges.items():
            for dst, _ in outs:
                reverse.setdefault(dst, []).append(src)
        co_reachable = _reach(self.end, lambda n: reverse.get(n, []))
        stuck = sorted(reachable - co_reachable)
        if stuck:
            raise UnreachableEnd(f"the end cannot be reached from {stuck}")
        return self

    def schema(self) -> AttributeSchema:
        attrs = (
            Attribute("activity", AttributeKind.CATEGORICAL),
            Attribute("timestamp", AttributeKind.TIMESTAMP),
        ) + tuple(rule.attribute for rule in self.attrs)
        return AttributeSchema(attrs, "case_id", "activity", "timestamp")


def _reach(root: str, neighbours) -> set:
    seen = {root}
    queue = deque([root])
    while queue:
        n = queue.popleft()
        for m in neighbours(n):
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return seen


def load_process_spec(path) -> ProcessSpec:
    data = read_json_file(path)
    if not isinstance(data, dict):
        raise InvalidProcessSpec("process spec must be a JSON object")
    return ProcessSpec.from_dict(data)


def _walk(spec: ProcessSpec, rng: np.random.Generator) -> List[str]:
    for _ in range(MAX_RESAMPLES):
        path = [spec.start]
        while path[-1] != spec.end and len(path) <= spec.max_steps:
            outs = spec.edges[path[-1]]
            pick = rng.choice(len(outs), p=[p for _, p in outs])
            path.append(outs[pick][0])
        if path[-1] == spec.end and len(path) <= spec.max_steps:
            return path
    raise UnreachableEnd(f"no walk ended within {spec.max_steps} steps after {MAX_RESAMPLES} attempts")


def generate_synthetic_log(spec: ProcessSpec, n_traces: int, seed: int = 123) -> EventLog:
    schema = spec.schema()
    rng = np.random.default_rng(seed)
    traces = []
    width = len(str(max(n_traces - 1, 0)))
    for i in range(n_traces):
        path = _walk(spec, rng)
        t = BASE_TIME + timedelta(hours=i)
        events = []
        for pos, act in enumerate(path):
            if pos > 0:
                lo, hi = spec.durations.get(act, DEFAULT_DURATION)
                t = t + timedelta(seconds=int(rng.integers(lo, hi + 1)))
            values = {"activity": act, "timestamp": t}
            for rule in spec.attrs:
                values[rule.name] = rule.render(act, pos)
            events.append(Event(values))
        traces.append(Trace(f"case_{i:0{width}d}", events))
    log.info("generated %d traces from %d activities", n_traces, len(spec.activities))
    return EventLog(schema, traces).validate()
