"""
Optimisation: Adam with coupled weight decay, mini-batch epochs over the
four-strategy expansion of the training split, early stopping on the
validation loss, and random hyperparameter search.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from models import EventLog
from . import metrics
from .encoding import EncoderSet
from .errors import (
    AGGREGATORS,
    EmptyLog,
    InvalidFlag,
    NonFiniteLoss,
    NumericalError,
    ProvenanceError,
    parse_positive_float,
    parse_positive_int,
    validate_aggregator,
)
from .graph import HeteroGraph, batch_graphs, build_graph
from .io_utils import atomic_output
from .masking import MaskStrategy, apply_mask, mask_seed, training_strategies
from .model import ModelConfig, ModelParams, compute_loss, forward, init_params
from .tensor import Tape, backward

log = logging.getLogger(__name__)

BATCH_SIZES = (16, 64, 256, 512, 1024, 2048)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-2
    aggregator: str = "mean"
    max_epochs: int = 50
    # None (or 0) disables early stopping
    patience: int | None = 5
    seed: int = 123
    # per-epoch learning-rate multiplier; 1.0 keeps it constant
    lr_gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "learning_rate", parse_positive_float(self.learning_rate, "learning rate"))
        gamma = parse_positive_float(self.lr_gamma, "lr gamma")
        if gamma > 1.0:
            raise InvalidFlag("lr gamma must lie in (0, 1]")
        object.__setattr__(self, "lr_gamma", gamma)
        object.__setattr__(self, "batch_size", parse_positive_int(self.batch_size, "batch size"))
        object.__setattr__(self, "weight_decay", parse_positive_float(self.weight_decay, "weight decay", allow_zero=True))
        object.__setattr__(self, "aggregator", validate_aggregator(self.aggregator))
        object.__setattr__(self, "max_epochs", parse_positive_int(self.max_epochs, "max epochs"))
        if self.patience in (None, 0):
            object.__setattr__(self, "patience", None)
        else:
            object.__setattr__(self, "patience", parse_positive_int(self.patience, "patience"))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidFlag(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray] | None, state: AdamState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    """One update. `grads=None` reads each Parameter's accumulator. Gradients are zeroed afterwards."""
    state.t += 1
    lr = cfg.learning_rate if lr is None else lr
    wd = cfg.weight_decay
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.tensors.items():
        g = (grads[name] if grads is not None else p.grad) + wd * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    # loss of the returned parameters over the whole training expansion
    final_train_loss: float = math.nan

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)

    def to_rows(self) -> List[Dict]:
        return [asdict(r) for r in self.records]


def expand_graphs(log_: EventLog, enc: EncoderSet, strategies: Sequence[MaskStrategy], seed: int) -> List[HeteroGraph]:
    """Every trace once per strategy, with masks fixed for the whole run."""
    graphs = []
    for s, strategy in enumerate(strategies):
        for i, trace in enumerate(log_.traces):
            mask = apply_mask(len(trace), strategy, mask_seed(seed, s, i))
            graphs.append(build_graph(trace, mask, enc))
    return graphs


def _chunks(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def dataset_loss(graphs: Sequence[HeteroGraph], params: ModelParams, batch_size: int) -> float:
    """Mean per-batch loss, no tape."""
    losses = []
    for chunk in _chunks(graphs, batch_size):
        batch = batch_graphs(chunk)
        losses.append(compute_loss(forward(batch, params), batch).item())
    return float(np.mean(losses)) if losses else 0.0


def _check_provenance(train: EventLog, val: EventLog) -> None:
    for name, part in (("training", train), ("validation", val)):
        if part.provenance == "test":
            raise ProvenanceError(f"the {name} data is tagged as the test split")


def train_model(
    train: EventLog,
    val: EventLog,
    enc: EncoderSet,
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    strategies: Sequence[MaskStrategy] | None = None,
) -> Tuple[ModelParams, History]:
    _check_provenance(train, val)
    if not train.traces:
        raise EmptyLog("the training split is empty")
    if not val.traces:
        raise EmptyLog("the validation split is empty")

    strategies = tuple(strategies or training_strategies())
    model_cfg = replace(model_cfg, aggregator=cfg.aggregator, seed=cfg.seed)
    params = init_params(enc, model_cfg)
    train_graphs = expand_graphs(train, enc, strategies, cfg.seed)
    val_graphs = expand_graphs(val, enc, strategies, cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = History()
    best_flat = params.flat()
    since_best = 0

    log.info("training on %d graphs (%d traces × %d strategies), %d parameters",
             len(train_graphs), len(train), len(strategies), params.count())
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate * cfg.lr_gamma ** (epoch - 1)
        order = rng.permutation(len(train_graphs))
        losses = []
        for chunk in _chunks(order, cfg.batch_size):
            started = time.perf_counter()
            batch = batch_graphs([train_graphs[i] for i in chunk])
            try:
                with Tape():
                    loss = compute_loss(forward(batch, params), batch)
                    backward(loss)
            except NumericalError as e:
                raise NonFiniteLoss(f"epoch {epoch}: {e.message}", epoch=epoch)
            adam_step(params, None, state, cfg, lr)
            losses.append(loss.item())
            metrics.STEP_COUNT.inc()
            metrics.STEP_LATENCY.observe(time.perf_counter() - started)

        try:
            val_loss = dataset_loss(val_graphs, params, cfg.batch_size)
        except NumericalError as e:
            raise NonFiniteLoss(f"epoch {epoch} validation: {e.message}", epoch=epoch)
        train_loss = float(np.mean(losses))
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NonFiniteLoss(f"epoch {epoch}: loss is not finite", epoch=epoch)
        improved = val_loss < history.best_val_loss
        history.records.append(EpochRecord(epoch, train_loss, val_loss))
        metrics.EPOCH_COUNT.inc()
        metrics.VAL_LOSS.set(val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

        if improved:
            history.best_epoch = epoch
            best_flat = params.flat()
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                history.stopped_early = True
                log.info("early stop after epoch %d, best epoch %d (val %.5f)",
                         epoch, history.best_epoch, history.best_val_loss)
                break

    params.load_flat(best_flat)
    try:
        history.final_train_loss = dataset_loss(train_graphs, params, cfg.batch_size)
    except NumericalError as e:
        raise NonFiniteLoss(f"final training loss: {e.message}", epoch=history.best_epoch)
    log.info("final training loss %.5f", history.final_train_loss)
    return params, history


def write_history_csv(history: History, path) -> None:
    frame = pd.DataFrame(history.to_rows(), columns=["epoch", "train_loss", "val_loss"])
    with atomic_output(path, "w", newline="", encoding="utf-8") as fh:
        frame.to_csv(fh, index=False, lineterminator="\n")


# hyperparameter search

def _items(values, name: str) -> Tuple:
    if isinstance(values, (str, bytes)) or not isinstance(values, (list, tuple)) or not values:
        raise InvalidFlag(f"{name} must be a non-empty list")
    return tuple(values)


def _range(values, name: str, allow_zero: bool) -> Tuple[float, float]:
    bounds = _items(values, name)
    if len(bounds) != 2:
        raise InvalidFlag(f"{name} must be [low, high]")
    lo, hi = (parse_positive_float(b, name, allow_zero=allow_zero) for b in bounds)
    if lo > hi:
        raise InvalidFlag(f"{name}: low {lo} exceeds high {hi}")
    return lo, hi


@dataclass(frozen=True)
class SearchSpace:
    lr_range: Tuple[float, float] = (1e-4, 1e-1)
    batch_sizes: Tuple[int, ...] = BATCH_SIZES
    wd_range: Tuple[float, float] = (1e-2, 1e-1)
    aggregators: Tuple[str, ...] = AGGREGATORS

    def __post_init__(self):
        object.__setattr__(self, "lr_range", _range(self.lr_range, "lr_range", allow_zero=False))
        object.__setattr__(self, "wd_range", _range(self.wd_range, "wd_range", allow_zero=True))
        batch_sizes = tuple(parse_positive_int(b, "batch size") for b in _items(self.batch_sizes, "batch_sizes"))
        object.__setattr__(self, "batch_sizes", batch_sizes)
        aggregators = tuple(validate_aggregator(a) for a in _items(self.aggregators, "aggregators"))
        object.__setattr__(self, "aggregators", aggregators)

    @classmethod
    def from_dict(cls, data: Dict) -> "SearchSpace":
        if not isinstance(data, dict):
            raise InvalidFlag("the search section must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidFlag(f"unknown search options: {sorted(unknown)}")
        return cls(**data)

    def sample(self, rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
        lo, hi = self.lr_range
        lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        bs = int(self.batch_sizes[rng.integers(len(self.batch_sizes))])
        wd = float(rng.uniform(*self.wd_range))
        agg = self.aggregators[rng.integers(len(self.aggregators))]
        return replace(base, learning_rate=lr, batch_size=bs, weight_decay=wd, aggregator=agg)


@dataclass
class Trial:
    index: int
    config: TrainConfig
    loss: float


class RandomSearch:
    def __init__(self, space: SearchSpace, budget: int, seed: int = 123,
                 base: TrainConfig = TrainConfig(), workers: int = 1):
        self.space = space
        self.budget = parse_positive_int(budget, "trials")
        self.seed = seed
        self.base = base
        self.workers = workers
        self.trials: List[Trial] = []

    def candidates(self) -> List[TrainConfig]:
        # all samples drawn up front so the sequence does not depend on scheduling
        rng = np.random.default_rng(self.seed)
        return [self.space.sample(rng, self.base) for _ in range(self.budget)]

    def run(self, objective: Callable[[TrainConfig], float]) -> TrainConfig:
        configs = self.candidates()
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                losses = list(pool.map(objective, configs))
        else:
            losses = [objective(c) for c in configs]
        self.trials = [Trial(i, c, float(l)) for i, (c, l) in enumerate(zip(configs, losses))]
        for t in self.trials:
            log.info("trial %d: lr=%.2e batch=%d wd=%.3f agg=%s -> val loss %.5f",
                     t.index, t.config.learning_rate, t.config.batch_size,
                     t.config.weight_decay, t.config.aggregator, t.loss)
        best = min(self.trials, key=lambda t: (t.loss, t.index))
        return best.config


def random_search(space: SearchSpace, budget: int, seed: int, objective: Callable[[TrainConfig], float],
                  base: TrainConfig = TrainConfig(), workers: int = 1) -> TrainConfig:
    return RandomSearch(space, budget, seed, base, workers).run(objective)


def validation_objective(train: EventLog, val: EventLog, enc: EncoderSet,
                         model_cfg: ModelConfig = ModelConfig()) -> Callable[[TrainConfig], float]:
    """Trial objective: best validation loss reached by one training run."""
    def objective(cfg: TrainConfig) -> float:
        _, history = train_model(train, val, enc, cfg, model_cfg)
        return history.best_val_loss
    return objective
