"""
Metrics, multi-run evaluation and log repair.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from models import AttributeSchema, AttributeScope, Event, EventLog, Trace, epoch_seconds, is_missing
from . import metrics
from .encoding import EncoderSet, fit_encoders
from .errors import ArtifactFormatError, EmptyEvaluationSet, InvalidFlag, LengthMismatch, RepairError, SchemaMismatch
from .graph import batch_graphs, build_graph
from .io_utils import write_json
from .masking import MaskStrategy, apply_mask, mask_seed, training_strategies
from .model import ModelConfig, ModelParams, decode_predictions, forward
from .training import TrainConfig, train_model

log = logging.getLogger(__name__)

EVAL_BATCH = 256


def accuracy(preds: Sequence, truth: Sequence) -> float:
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions for {len(truth)} truths")
    if not preds:
        raise EmptyEvaluationSet("no categorical cells to score")
    return sum(p == t for p, t in zip(preds, truth)) / len(preds)


def mae(preds: Sequence[float], truth: Sequence[float]) -> float:
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions for {len(truth)} truths")
    if len(preds) == 0:
        raise EmptyEvaluationSet("no numeric cells to score")
    return float(np.mean(np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(truth, dtype=np.float64))))


@dataclass
class AttributeMetric:
    attribute: str
    metric: str  # "accuracy" or "mae"
    value: float
    n: int
    raw_mae: float | None = None


def evaluate_model(params: ModelParams, log_: EventLog, enc: EncoderSet,
                   strategy: MaskStrategy, seed: int = 123) -> Dict[str, AttributeMetric]:
    """Score one strategy. Masks match `mask_log(log_, strategy, seed)` trace by trace."""
    graphs = [
        build_graph(t, apply_mask(len(t), strategy, mask_seed(seed, i)), enc)
        for i, t in enumerate(log_.traces)
    ]
    pred_cls: Dict[str, List[int]] = {a: [] for a in enc.schema.names}
    pred_num: Dict[str, List[float]] = {a: [] for a in enc.schema.names}
    truth: Dict[str, List[float]] = {a: [] for a in enc.schema.names}
    for start in range(0, len(graphs), EVAL_BATCH):
        batch = batch_graphs(graphs[start:start + EVAL_BATCH])
        preds = forward(batch, params)
        for a in batch.attributes:
            y = batch.target[a][preds.rows[a]]
            known = ~np.isnan(y)
            out = preds.outputs[a].data[known]
            truth[a].extend(y[known].tolist())
            if preds.categorical[a]:
                choice = np.argmax(out[:, :-1], axis=1) if out.shape[1] > 1 else np.full(len(out), -1)
                pred_cls[a].extend(int(c) for c in choice)
            else:
                pred_num[a].extend(out[:, 0].tolist())

    results = {}
    for a in enc.schema.names:
        if not truth[a]:
            continue
        if enc.is_categorical(a):
            results[a] = AttributeMetric(a, "accuracy", accuracy(pred_cls[a], [int(t) for t in truth[a]]), len(truth[a]))
        else:
            t = enc.transforms[a]
            raw = mae([t.inverse(t.clip(p)) for p in pred_num[a]], [t.inverse(y) for y in truth[a]])
            results[a] = AttributeMetric(a, "mae", mae(pred_num[a], truth[a]), len(truth[a]), raw_mae=raw)
            log.debug("%s/%s raw-unit MAE %.3f", strategy.name, a, raw)
    if not results:
        raise EmptyEvaluationSet(f"strategy {strategy.name} masks no scorable cell")
    return results


@dataclass
class MetricSummary:
    metric: str
    mean: float | None
    std: float | None
    runs: List[float | None] = field(default_factory=list)
    raw_mae_mean: float | None = None

    @classmethod
    def from_runs(cls, metric: str, runs: List[float | None], raw: List[float | None] = ()) -> "MetricSummary":
        present = [r for r in runs if r is not None]
        raw_present = [r for r in raw if r is not None]
        return cls(
            metric=metric,
            mean=float(np.mean(present)) if present else None,
            std=float(np.std(present)) if present else None,
            runs=list(runs),
            raw_mae_mean=float(np.mean(raw_present)) if raw_present else None,
        )


@dataclass
class RunReport:
    results: Dict[str, Dict[str, MetricSummary]]
    curves: List[List[Dict]] = field(default_factory=list)
    wall_clock: float = 0.0

    def rows(self) -> List[Tuple[str, str, MetricSummary]]:
        return [(s, a, m) for s, attrs in self.results.items() for a, m in attrs.items()]

    def to_dict(self) -> Dict:
        doc = {s: {a: asdict(m) for a, m in attrs.items()} for s, attrs in self.results.items()}
        doc["_meta"] = {"wall_clock_seconds": self.wall_clock, "curves": self.curves}
        return doc

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunReport":
        meta = data.get("_meta", {})
        try:
            results = {
                s: {a: MetricSummary(**m) for a, m in attrs.items()}
                for s, attrs in data.items() if s != "_meta"
            }
        except TypeError as e:
            raise ArtifactFormatError(f"invalid run report: {e}")
        return cls(results, list(meta.get("curves", [])), float(meta.get("wall_clock_seconds", 0.0)))

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path) -> "RunReport":
        from .config import read_json_file
        return cls.from_dict(read_json_file(path))


def _one_run(run: int, cfg: TrainConfig, model_cfg: ModelConfig, splits, enc: EncoderSet,
             strategies: Sequence[MaskStrategy]):
    train, val, test = splits
    try:
        params, history = train_model(train, val, enc, replace(cfg, seed=cfg.seed + run), model_cfg)
        # every run is scored on the same damaged test variants
        scores = {s.name: evaluate_model(params, test, enc, s, seed=cfg.seed) for s in strategies}
    except RepairError as e:
        e.details["run"] = run
        e.message = f"run {run}: {e.message}"
        raise
    log.info("run %d finished after %d epochs (best %d)", run, len(history.records), history.best_epoch)
    return scores, history.to_rows()


def evaluate_multi_run(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    splits: Tuple[EventLog, EventLog, EventLog],
    enc: EncoderSet | None = None,
    n_runs: int = 10,
    strategies: Sequence[MaskStrategy] | None = None,
    workers: int = 1,
    deterministic: bool = True,
) -> RunReport:
    if n_runs < 1:
        raise InvalidFlag("runs must be ≥ 1")
    strategies = tuple(strategies or training_strategies())
    enc = enc or fit_encoders(splits[0])
    started = time.perf_counter()
    args = (cfg, model_cfg, splits, enc, strategies)
    if workers > 1 and not deterministic:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda r: _one_run(r, *args), range(n_runs)))
    else:
        outcomes = [_one_run(r, *args) for r in range(n_runs)]

    results: Dict[str, Dict[str, MetricSummary]] = {}
    for s in strategies:
        results[s.name] = {}
        for attr in enc.schema.names:
            per_run = [scores[s.name].get(attr) for scores, _ in outcomes]
            kind = "accuracy" if enc.is_categorical(attr) else "mae"
            results[s.name][attr] = MetricSummary.from_runs(
                kind,
                [m.value if m else None for m in per_run],
                [m.raw_mae if m else None for m in per_run],
            )
    return RunReport(results, [curve for _, curve in outcomes], time.perf_counter() - started)


def depth_study(cfg: TrainConfig, model_cfg: ModelConfig, splits, depths: Sequence[int] = (2, 4),
                n_runs: int = 5, strategies: Sequence[MaskStrategy] | None = None,
                enc: EncoderSet | None = None) -> Dict[int, RunReport]:
    """Same seeds for every depth, so the runs are paired."""
    enc = enc or fit_encoders(splits[0])
    return {
        k: evaluate_multi_run(cfg, replace(model_cfg, n_layers=k), splits, enc, n_runs, strategies)
        for k in depths
    }


def compare_reports(full: RunReport, at: RunReport) -> Dict[str, Dict[str, float]]:
    """Mean(full) - mean(at) per strategy and shared attribute."""
    deltas: Dict[str, Dict[str, float]] = {}
    for s, attrs in full.results.items():
        other = at.results.get(s, {})
        for a, m in attrs.items():
            o = other.get(a)
            if o is None or m.mean is None or o.mean is None:
                continue
            deltas.setdefault(s, {})[a] = m.mean - o.mean
    return deltas


def categorical_accuracy_summary(report: RunReport, strategies: Sequence[str] = ("odd", "even")) -> Dict[str, float]:
    values = [
        m.mean for s in strategies for m in report.results.get(s, {}).values()
        if m.metric == "accuracy" and m.mean is not None
    ]
    if not values:
        raise EmptyEvaluationSet("no categorical accuracies in the report")
    return {
        "count": len(values),
        "above_0_8": sum(v > 0.8 for v in values),
        "below_0_5": sum(v < 0.5 for v in values),
        "median": float(np.median(values)),
    }


# repair

def _clamp_timestamps(values: List[Dict], repaired: List[bool], ts_col: str) -> None:
    """Keep repaired main timestamps between their neighbours."""
    n = len(values)
    lower = None
    for i in range(n):
        ts = values[i][ts_col]
        if repaired[i]:
            upper = next((values[j][ts_col] for j in range(i + 1, n)
                          if not repaired[j] and not is_missing(values[j][ts_col])), None)
            if lower is not None and epoch_seconds(ts) < epoch_seconds(lower):
                ts = lower
            if upper is not None and epoch_seconds(ts) > epoch_seconds(upper):
                ts = upper
            values[i][ts_col] = ts
        if not is_missing(values[i][ts_col]):
            lower = values[i][ts_col]


def repair_log(damaged: EventLog, params: ModelParams, enc: EncoderSet) -> EventLog:
    """Fill the missing cells of the model's attributes; other columns pass through untouched."""
    schema, model = damaged.schema, enc.schema
    for attr in model.attributes:
        if attr.name not in schema.names or schema.get(attr.name) != attr:
            raise SchemaMismatch(f"log attributes {list(schema.names)} do not cover the model's {list(model.names)}")
    if schema.timestamp_column != model.timestamp_column:
        raise SchemaMismatch("the log and the model disagree on the timestamp column")

    traces = list(damaged.traces)
    repaired: List[Trace] = []
    for start in range(0, len(traces), EVAL_BATCH):
        chunk = traces[start:start + EVAL_BATCH]
        graphs = [build_graph(t, np.zeros(len(t), dtype=bool), enc) for t in chunk]
        batch = batch_graphs(graphs)
        fills: Dict[int, Dict[Tuple[int, str], object]] = {}
        for r in decode_predictions(forward(batch, params), batch, enc):
            if r.value is not None:
                fills.setdefault(r.graph_id, {})[(r.event_index, r.attribute)] = r.value
        for g, trace in enumerate(chunk):
            repaired.append(_fill_trace(trace, fills.get(g, {}), model))
    return damaged.with_traces(repaired).validate()


def _fill_trace(trace: Trace, fills: Dict[Tuple[int, str], object], schema: AttributeSchema) -> Trace:
    values = [dict(e.values) for e in trace.events]
    touched = [[False] * len(values) for _ in schema.names]
    for k, attr in enumerate(schema.attributes):
        a = attr.name
        present = [v[a] for v in values if not is_missing(v[a])]
        if attr.scope is AttributeScope.TRACE:
            # one value per trace: a Present sibling wins over the model
            first = next((fills[(i, a)] for i in range(len(values)) if (i, a) in fills), None)
            fill_value = present[0] if present else first
        for i, v in enumerate(values):
            if not is_missing(v[a]):
                continue
            value = fill_value if attr.scope is AttributeScope.TRACE else fills.get((i, a))
            if value is None:
                log.warning("trace %r event %d: no repair for %r", trace.case_id, i, a)
                continue
            v[a] = value
            touched[k][i] = True
            metrics.REPAIRED_CELLS.labels(a).inc()
    ts_col = schema.timestamp_column
    _clamp_timestamps(values, touched[schema.names.index(ts_col)], ts_col)
    return Trace(trace.case_id, [Event(v) for v in values])
