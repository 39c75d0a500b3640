"""
Heterogeneous SAGE network.

Per attribute: a linear input projection into the hidden size. Per layer
and relation r: out_dst += h_dst·W1_r + agg(h_src over N_r(dst))·W2_r + b_r,
followed by ReLU on every layer but the last. Per attribute: a linear head
applied only to the rows flagged for repair.
"""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from models import AttributeKind
from .encoding import EncoderSet
from .errors import ArtifactFormatError, SchemaMismatch, ShapeMismatch, parse_positive_int, validate_aggregator
from .graph import GraphBatch, HeteroGraph, Relation, batch_graphs, relations_for
from .io_utils import atomic_output
from .tensor import (
    Parameter,
    Tensor,
    add,
    l1_loss,
    matmul,
    relu,
    segment_aggregate,
    softmax_cross_entropy,
    take_rows,
)

log = logging.getLogger(__name__)

MAGIC = b"SGRF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 128
    n_layers: int = 2
    aggregator: str = "mean"
    seed: int = 123

    def __post_init__(self):
        object.__setattr__(self, "hidden_size", parse_positive_int(self.hidden_size, "hidden size"))
        object.__setattr__(self, "n_layers", parse_positive_int(self.n_layers, "layers"))
        object.__setattr__(self, "aggregator", validate_aggregator(self.aggregator))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelParams:
    config: ModelConfig
    attributes: Tuple[str, ...]
    relations: Tuple[Relation, ...]
    widths: Dict[str, int]
    schema_hash: bytes
    tensors: Dict[str, Parameter] = field(default_factory=dict)
    categorical: Tuple[str, ...] = ()

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def parameters(self) -> List[Parameter]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(p.data.size for p in self.tensors.values())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.tensors.values()])

    def load_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.count():
            raise ArtifactFormatError(f"expected {self.count()} values, got {vector.size}")
        pos = 0
        for p in self.tensors.values():
            n = p.data.size
            p.data[...] = vector[pos:pos + n].reshape(p.data.shape)
            pos += n


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(enc: EncoderSet, cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    hidden = cfg.hidden_size
    schema = enc.schema
    widths = enc.widths()
    relations = relations_for(schema)
    tensors: Dict[str, Parameter] = {}

    def put(name, data):
        tensors[name] = Parameter(data, name=name)

    for a in schema.names:
        put(f"input.{a}.weight", _glorot(rng, widths[a], hidden))
        put(f"input.{a}.bias", np.zeros((1, hidden)))
    for k in range(cfg.n_layers):
        for r in relations:
            put(f"layer{k}.{r.key}.w1", _glorot(rng, hidden, hidden))
            put(f"layer{k}.{r.key}.w2", _glorot(rng, hidden, hidden))
            put(f"layer{k}.{r.key}.bias", np.zeros((1, hidden)))
    for a in schema.names:
        put(f"head.{a}.weight", _glorot(rng, hidden, widths[a]))
        put(f"head.{a}.bias", np.zeros((1, widths[a])))
    categorical = tuple(a for a in schema.names if enc.is_categorical(a))
    return ModelParams(cfg, schema.names, relations, widths, enc.schema_hash(), tensors, categorical)


def _as_batch(graph) -> GraphBatch:
    return batch_graphs([graph]) if isinstance(graph, HeteroGraph) else graph


def sage_layer(h: Dict[str, Tensor], graph, params: ModelParams, layer: int,
               aggregator: str, last: bool = False) -> Dict[str, Tensor]:
    batch = _as_batch(graph)
    out: Dict[str, Tensor] = {}
    for r in batch.relations:
        if h[r.dst].shape[0] != batch.num_rows or h[r.src].shape[0] != batch.num_rows:
            raise ShapeMismatch(f"hidden tables are not aligned with the graph ({batch.num_rows} rows)")
        prefix = f"layer{layer}.{r.key}"
        self_term = matmul(h[r.dst], params[f"{prefix}.w1"])
        neigh = matmul(segment_aggregate(h[r.src], batch.neighborhoods(r), aggregator), params[f"{prefix}.w2"])
        msg = add(add(self_term, neigh), params[f"{prefix}.bias"])
        out[r.dst] = add(out[r.dst], msg) if r.dst in out else msg
    return out if last else {a: relu(t) for a, t in out.items()}


@dataclass
class Predictions:
    """Head outputs for flagged rows only, with (graph, event) provenance per row."""

    outputs: Dict[str, Tensor]
    rows: Dict[str, np.ndarray]
    graph_ids: Dict[str, np.ndarray]
    event_index: Dict[str, np.ndarray]
    categorical: Dict[str, bool]

    @property
    def n_rows(self) -> int:
        return sum(len(r) for r in self.rows.values())


def _check_compatible(batch: GraphBatch, params: ModelParams) -> None:
    if batch.attributes != params.attributes or batch.relations != params.relations:
        raise SchemaMismatch("batch attributes do not match the model")
    for a in batch.attributes:
        if batch.x[a].shape[1] != params.widths[a]:
            raise SchemaMismatch(f"feature width of {a!r} is {batch.x[a].shape[1]}, model expects {params.widths[a]}")


def forward(batch, params: ModelParams, cfg: ModelConfig | None = None) -> Predictions:
    batch = _as_batch(batch)
    cfg = cfg or params.config
    _check_compatible(batch, params)

    h = {
        a: add(matmul(Tensor(batch.x[a]), params[f"input.{a}.weight"]), params[f"input.{a}.bias"])
        for a in batch.attributes
    }
    for k in range(cfg.n_layers):
        h = sage_layer(h, batch, params, k, cfg.aggregator, last=k == cfg.n_layers - 1)

    outputs, rows, gids, events, categorical = {}, {}, {}, {}, {}
    for a in batch.attributes:
        idx = np.flatnonzero(batch.mask[a])
        selected = take_rows(h[a], idx)
        outputs[a] = add(matmul(selected, params[f"head.{a}.weight"]), params[f"head.{a}.bias"])
        rows[a] = idx
        gids[a] = batch.graph_ids[idx]
        events[a] = batch.event_index[idx]
        categorical[a] = a in params.categorical
    return Predictions(outputs, rows, gids, events, categorical)


def compute_loss(preds: Predictions, batch) -> Tensor:
    batch = _as_batch(batch)
    total = None
    for a, out in preds.outputs.items():
        y = batch.target[a][preds.rows[a]]
        known = np.flatnonzero(~np.isnan(y))
        if known.size == 0:
            continue
        sel = take_rows(out, known)
        if preds.categorical[a]:
            term = softmax_cross_entropy(sel, y[known].astype(np.int64))
        else:
            term = l1_loss(sel, y[known].reshape(-1, 1))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


class Repair(NamedTuple):
    graph_id: int
    event_index: int
    attribute: str
    value: object
    encoded: float


def decode_predictions(preds: Predictions, batch: GraphBatch, enc: EncoderSet) -> List[Repair]:
    repairs = []
    for a in batch.attributes:
        out = preds.outputs[a].data
        if preds.categorical[a]:
            # MISSING VALUE is the last class and never a repair
            choice = np.argmax(out[:, :-1], axis=1) if out.shape[1] > 1 else np.zeros(len(out), dtype=np.int64)
            for g, i, c in zip(preds.graph_ids[a], preds.event_index[a], choice):
                value = enc.decode(a, int(c)) if out.shape[1] > 1 else None
                repairs.append(Repair(int(g), int(i), a, value, float(c)))
            continue
        kind = enc.schema.get(a).kind
        transform = enc.transforms[a]
        for g, i, p in zip(preds.graph_ids[a], preds.event_index[a], out[:, 0]):
            raw = transform.inverse(transform.clip(float(p)))
            if kind is AttributeKind.TIMESTAMP:
                origin = batch.origins[int(g)].get(a)
                if origin is None:
                    raise SchemaMismatch(f"no timestamp origin for {a!r} in trace {batch.case_ids[int(g)]!r}")
                value = origin + timedelta(seconds=raw)
            else:
                value = raw
            repairs.append(Repair(int(g), int(i), a, value, float(p)))
    return repairs


def predict_repair(graph: HeteroGraph, params: ModelParams, enc: EncoderSet) -> List[Tuple[int, str, object]]:
    batch = batch_graphs([graph])
    preds = forward(batch, params)
    return [(r.event_index, r.attribute, r.value) for r in decode_predictions(preds, batch, enc)]


# SGRF binary: magic, u32 version, u32 + schema hash, u32 + header JSON, <f8 blocks

def save_params(params: ModelParams, path) -> None:
    header = json.dumps({
        "config": asdict(params.config),
        "attributes": list(params.attributes),
        "widths": params.widths,
        "tensors": [[name, list(p.shape)] for name, p in params.tensors.items()],
    }, sort_keys=True).encode("utf-8")
    with atomic_output(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(params.schema_hash)))
        fh.write(params.schema_hash)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in params.tensors.values():
            fh.write(p.data.astype("<f8").tobytes())


def load_params(path, enc: EncoderSet) -> ModelParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise ArtifactFormatError(f"cannot read parameters: {e}")
    if blob[:4] != MAGIC:
        raise ArtifactFormatError("not an SGRF parameter file")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise ArtifactFormatError(f"unsupported SGRF version {version}")
        (hlen,) = struct.unpack_from("<I", blob, 8)
        schema_hash = blob[12:12 + hlen]
        pos = 12 + hlen
        (jlen,) = struct.unpack_from("<I", blob, pos)
        header = json.loads(blob[pos + 4:pos + 4 + jlen].decode("utf-8"))
        pos += 4 + jlen
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ArtifactFormatError(f"corrupt SGRF header: {e}")
    if schema_hash != enc.schema_hash():
        raise SchemaMismatch("parameters were trained with different encoders")

    params = init_params(enc, ModelConfig.from_dict(header["config"]))
    for name, shape in header["tensors"]:
        p = params.tensors.get(name)
        if p is None or list(p.shape) != shape:
            raise ArtifactFormatError(f"unexpected tensor {name!r} {shape}")
        n = p.data.size
        chunk = blob[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise ArtifactFormatError("truncated SGRF parameter block")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        pos += 8 * n
    if pos != len(blob):
        raise ArtifactFormatError("trailing bytes after the last parameter block")
    return params
