"""
Masking strategies: which events of a trace are removed, with all their attributes.

Indices are 0-based: ODD removes 1, 3, 5, ...; EVEN removes 0, 2, 4, ...;
WINDOW keeps one event and removes the next two; RANDOM removes each event
with probability p but never all of them.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from models import MISSING, Event, EventLog, Trace
from .errors import InvalidFlag, LengthMismatch, parse_probability

log = logging.getLogger(__name__)


class MaskKind(str, Enum):
    ODD = "odd"
    EVEN = "even"
    WINDOW = "window"
    RANDOM = "random"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class MaskStrategy:
    kind: MaskKind
    p: float | None = None
    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind is MaskKind.RANDOM:
            parse_probability(self.p, "random-p")

    @classmethod
    def odd(cls) -> "MaskStrategy":
        return cls(MaskKind.ODD)

    @classmethod
    def even(cls) -> "MaskStrategy":
        return cls(MaskKind.EVEN)

    @classmethod
    def window(cls) -> "MaskStrategy":
        return cls(MaskKind.WINDOW)

    @classmethod
    def random(cls, p: float = 0.5) -> "MaskStrategy":
        return cls(MaskKind.RANDOM, p=p)

    @classmethod
    def explicit(cls, indices: Sequence[int]) -> "MaskStrategy":
        return cls(MaskKind.EXPLICIT, indices=tuple(sorted({int(i) for i in indices})))

    @classmethod
    def parse(cls, name: str, p: float = 0.5) -> "MaskStrategy":
        key = (name or "").strip().lower()
        if key == "random":
            return cls.random(p)
        if key in ("odd", "even", "window"):
            return cls(MaskKind(key))
        raise InvalidFlag("strategy must be one of ['odd', 'even', 'window', 'random']")

    @property
    def name(self) -> str:
        return self.kind.value


def training_strategies(p: float = 0.5) -> Tuple[MaskStrategy, ...]:
    return (MaskStrategy.odd(), MaskStrategy.even(), MaskStrategy.window(), MaskStrategy.random(p))


def mask_seed(seed: int, *keys: int) -> int:
    """Independent, reproducible seed for (seed, trace index, ...)."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]]).generate_state(1)[0])


def apply_mask(trace_len: int, strategy: MaskStrategy, seed: int = 123) -> np.ndarray:
    if trace_len < 1:
        raise LengthMismatch("trace length must be ≥ 1")
    idx = np.arange(trace_len)
    kind = strategy.kind
    if kind is MaskKind.ODD:
        return idx % 2 == 1
    if kind is MaskKind.EVEN:
        return idx % 2 == 0
    if kind is MaskKind.WINDOW:
        return idx % 3 != 0
    if kind is MaskKind.RANDOM:
        mask = np.random.default_rng(seed).random(trace_len) < strategy.p
        if mask.all():
            mask[0] = False
        return mask
    if any(i < 0 or i >= trace_len for i in strategy.indices):
        raise LengthMismatch(f"explicit mask indices {strategy.indices} exceed trace length {trace_len}")
    mask = np.zeros(trace_len, dtype=bool)
    mask[list(strategy.indices)] = True
    return mask


def max_missing_run(mask: Sequence[bool]) -> int:
    best = run = 0
    for flag in mask:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best


def coverage_check(mask: Sequence[bool], n_layers: int) -> bool:
    """False (and a warning) when some empty run is longer than 2·K: its middle sees no data."""
    run = max_missing_run(mask)
    if run > 2 * n_layers:
        log.warning("missing run of %d events exceeds the %d-layer receptive field (2·K = %d)",
                    run, n_layers, 2 * n_layers)
        return False
    return True


def mask_trace(trace: Trace, mask: Sequence[bool]) -> Trace:
    if len(mask) != len(trace):
        raise LengthMismatch(f"mask length {len(mask)} != trace length {len(trace)}")
    events = [
        Event({name: MISSING for name in e.values}) if flagged else Event(dict(e.values))
        for e, flagged in zip(trace.events, mask)
    ]
    return Trace(trace.case_id, events)


def mask_log(log_: EventLog, strategy: MaskStrategy, seed: int = 123) -> EventLog:
    traces = [
        mask_trace(t, apply_mask(len(t), strategy, mask_seed(seed, i)))
        for i, t in enumerate(log_.traces)
    ]
    return log_.with_traces(traces)
