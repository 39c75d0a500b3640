"""
Trace -> heterogeneous graph.

One node per (attribute, event). Relations:
  chain  a_i -> a_{i+1}              for every attribute a   (label "next")
  spoke  activity_i -> b_i            for every other b        (label "has")
and a distinct reverse relation for each ("rev_next", "rev_has").

Node rows of every attribute table are aligned with event order, so a row
index doubles as the event index inside one graph.
"""
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np

from models import AttributeKind, AttributeSchema, Trace, epoch_seconds, is_missing
from .encoding import MISSING_NUMERIC, EncoderSet, derive_value, trace_origin
from .errors import LengthMismatch, SchemaMismatch
from .tensor import Segments

log = logging.getLogger(__name__)

CHAIN = "next"
SPOKE = "has"


@dataclass(frozen=True)
class Relation:
    src: str
    label: str
    dst: str

    @property
    def is_reverse(self) -> bool:
        return self.label.startswith("rev_")

    def reverse(self) -> "Relation":
        if self.is_reverse:
            return Relation(self.dst, self.label[4:], self.src)
        return Relation(self.dst, f"rev_{self.label}", self.src)

    @property
    def key(self) -> str:
        return f"{self.src}.{self.label}.{self.dst}"


def relations_for(schema: AttributeSchema) -> Tuple[Relation, ...]:
    act = schema.activity_column
    forward = [Relation(a, CHAIN, a) for a in schema.names]
    forward += [Relation(act, SPOKE, b) for b in schema.names if b != act]
    return tuple(forward) + tuple(r.reverse() for r in forward)


def _edge_index(relation: Relation, n: int) -> np.ndarray:
    ar = np.arange(n, dtype=np.int64)
    base = relation if not relation.is_reverse else relation.reverse()
    if base.label == CHAIN:
        edges = np.stack([ar[:-1], ar[1:]])
    else:
        edges = np.stack([ar, ar])
    return edges[::-1].copy() if relation.is_reverse else edges


@dataclass
class HeteroGraph:
    case_id: str
    trace_len: int
    attributes: Tuple[str, ...]
    relations: Tuple[Relation, ...]
    x: Dict[str, np.ndarray]
    edges: Dict[Relation, np.ndarray]
    mask: Dict[str, np.ndarray]
    # class index or normalized value; NaN where there is nothing to learn
    target: Dict[str, np.ndarray]
    origins: Dict[str, datetime | None] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.trace_len * len(self.attributes)

    @property
    def num_edges(self) -> int:
        return sum(e.shape[1] for e in self.edges.values())

    def known(self, attr: str) -> np.ndarray:
        return self.mask[attr] & ~np.isnan(self.target[attr])

    def equals(self, other: "HeteroGraph") -> bool:
        if (self.case_id, self.trace_len, self.attributes, self.relations) != (
            other.case_id, other.trace_len, other.attributes, other.relations
        ):
            return False
        if self.origins != other.origins:
            return False
        return all(
            np.array_equal(self.x[a], other.x[a])
            and np.array_equal(self.mask[a], other.mask[a])
            and np.array_equal(self.target[a], other.target[a], equal_nan=True)
            for a in self.attributes
        ) and all(np.array_equal(self.edges[r], other.edges[r]) for r in self.relations)


def build_graph(trace: Trace, mask: Sequence[bool], enc: EncoderSet) -> HeteroGraph:
    n = len(trace)
    event_mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(event_mask) != n:
        raise LengthMismatch(f"mask length {len(event_mask)} != trace length {n}")
    schema = enc.schema
    try:
        columns = {a: trace.column(a) for a in schema.names}
    except KeyError as e:
        raise SchemaMismatch(f"trace {trace.case_id!r} has no attribute {e}")

    x, node_mask, target, origins = {}, {}, {}, {}
    for attr in schema.attributes:
        a = attr.name
        cells = columns[a]
        flagged = event_mask | np.array([is_missing(c) for c in cells], dtype=bool)
        node_mask[a] = flagged
        y = np.full(n, np.nan)

        if enc.is_categorical(a):
            rows = np.zeros((n, enc.width(a)))
            miss = enc.missing_index(a)
            for i, cell in enumerate(cells):
                rows[i, miss if flagged[i] else enc.class_index(a, cell)] = 1.0
                if flagged[i] and not is_missing(cell):
                    y[i] = enc.class_index(a, cell)
            x[a] = rows
            target[a] = y
            continue

        transform = enc.transforms[a]
        origin, anchored = None, True
        if attr.kind is AttributeKind.TIMESTAMP:
            visible = trace_origin(cells, ~flagged)
            # without a visible timestamp the elapsed times are not learnable
            anchored = visible is not None
            origin = visible or enc.reference_time(a)
            origins[a] = origin
        rows = np.full((n, 1), MISSING_NUMERIC)
        for i, cell in enumerate(cells):
            if is_missing(cell):
                continue
            if attr.kind is AttributeKind.TIMESTAMP:
                if origin is None:
                    continue
                # masked events before the visible origin clamp to 0
                derived = max(0.0, epoch_seconds(cell) - epoch_seconds(origin))
            else:
                derived = derive_value(cell, attr.kind)
            encoded = transform.forward(derived)
            if flagged[i]:
                if anchored:
                    y[i] = encoded
            else:
                rows[i, 0] = encoded
        x[a] = rows
        target[a] = y

    relations = relations_for(schema)
    return HeteroGraph(
        case_id=trace.case_id,
        trace_len=n,
        attributes=schema.names,
        relations=relations,
        x=x,
        edges={r: _edge_index(r, n) for r in relations},
        mask=node_mask,
        target=target,
        origins=origins,
    )


@dataclass
class GraphBatch:
    """Disjoint union of graphs. Row r of every attribute table belongs to graph graph_ids[r]."""

    attributes: Tuple[str, ...]
    relations: Tuple[Relation, ...]
    x: Dict[str, np.ndarray]
    edges: Dict[Relation, np.ndarray]
    mask: Dict[str, np.ndarray]
    target: Dict[str, np.ndarray]
    graph_ids: np.ndarray
    event_index: np.ndarray
    offsets: np.ndarray
    case_ids: Tuple[str, ...]
    origins: Tuple[Dict[str, datetime | None], ...]
    _segments: Dict[Relation, Segments] = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_graphs(self) -> int:
        return len(self.case_ids)

    @property
    def num_rows(self) -> int:
        return int(self.offsets[-1])

    def known(self, attr: str) -> np.ndarray:
        return self.mask[attr] & ~np.isnan(self.target[attr])

    def neighborhoods(self, relation: Relation) -> Segments:
        """Incoming neighbours per destination row of `relation`."""
        seg = self._segments.get(relation)
        if seg is None:
            e = self.edges[relation]
            seg = Segments.from_edges(e[0], e[1], self.num_rows)
            self._segments[relation] = seg
        return seg


def batch_graphs(graphs: Sequence[HeteroGraph]) -> GraphBatch:
    if not graphs:
        raise SchemaMismatch("cannot batch zero graphs")
    first = graphs[0]
    for g in graphs[1:]:
        if g.attributes != first.attributes or g.relations != first.relations:
            raise SchemaMismatch(f"graph {g.case_id!r} does not share the batch schema")
        for a in first.attributes:
            if g.x[a].shape[1] != first.x[a].shape[1]:
                raise SchemaMismatch(f"graph {g.case_id!r}: feature width of {a!r} differs")

    lengths = np.array([g.trace_len for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    edges = {
        r: np.concatenate([g.edges[r] + off for g, off in zip(graphs, offsets[:-1])], axis=1)
        for r in first.relations
    }
    return GraphBatch(
        attributes=first.attributes,
        relations=first.relations,
        x={a: np.concatenate([g.x[a] for g in graphs]) for a in first.attributes},
        edges=edges,
        mask={a: np.concatenate([g.mask[a] for g in graphs]) for a in first.attributes},
        target={a: np.concatenate([g.target[a] for g in graphs]) for a in first.attributes},
        graph_ids=np.repeat(np.arange(len(graphs)), lengths),
        event_index=np.concatenate([np.arange(n) for n in lengths]),
        offsets=offsets,
        case_ids=tuple(g.case_id for g in graphs),
        origins=tuple(dict(g.origins) for g in graphs),
    )


def unbatch(batch: GraphBatch) -> List[HeteroGraph]:
    graphs = []
    for k in range(batch.num_graphs):
        lo, hi = int(batch.offsets[k]), int(batch.offsets[k + 1])
        edges = {}
        for r, e in batch.edges.items():
            keep = (e[0] >= lo) & (e[0] < hi)
            edges[r] = e[:, keep] - lo
        graphs.append(HeteroGraph(
            case_id=batch.case_ids[k],
            trace_len=hi - lo,
            attributes=batch.attributes,
            relations=batch.relations,
            x={a: batch.x[a][lo:hi] for a in batch.attributes},
            edges=edges,
            mask={a: batch.mask[a][lo:hi] for a in batch.attributes},
            target={a: batch.target[a][lo:hi] for a in batch.attributes},
            origins=dict(batch.origins[k]),
        ))
    return graphs


def receptive_field(graph: HeteroGraph, attribute: str, event_index: int, n_layers: int) -> Set[Tuple[str, int]]:
    """Nodes whose features can reach (attribute, event_index) within n_layers message passing steps."""
    if attribute not in graph.attributes or not (0 <= event_index < graph.trace_len):
        raise SchemaMismatch(f"no node ({attribute!r}, {event_index}) in graph {graph.case_id!r}")
    incoming: Dict[str, List[Tuple[str, np.ndarray]]] = {}
    for r in graph.relations:
        incoming.setdefault(r.dst, []).append((r.src, graph.edges[r]))

    seen = {(attribute, event_index)}
    frontier = set(seen)
    for _ in range(n_layers):
        nxt = set()
        for a, i in frontier:
            for src, e in incoming.get(a, []):
                for j in e[0][e[1] == i]:
                    node = (src, int(j))
                    if node not in seen:
                        nxt.add(node)
        seen |= nxt
        frontier = nxt
    return seen
