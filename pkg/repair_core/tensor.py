"""
Dense 2-D float64 tensors with a reverse-mode tape.

Ops record onto the active Tape (one per thread, entered with `with Tape():`).
Outside a tape they just compute. `backward(loss)` sweeps the tape in reverse
and accumulates gradients into every Parameter reached.
"""
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .errors import IndexOutOfRange, NumericalError, ShapeMismatch

_local = threading.local()


class Tensor:
    __slots__ = ("data", "_node", "__weakref__")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got {arr.ndim} dimensions")
        self.data = arr
        self._node = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeMismatch(f"item() needs a 1×1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[np.ndarray | None, ...]]
    index: int = 0


@dataclass
class Tape:
    nodes: List[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> Tensor:
        node = TapeNode(op, tuple(inputs), output, vjp, index=len(self.nodes))
        self.nodes.append(node)
        output._node = (self, node)
        return output


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _finish(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, result, vjp)
    return result


def constant(data) -> Tensor:
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _finish("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.shape == (1, a.shape[1]):
        # bias row broadcast over rows
        return _finish("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeMismatch(f"add {a.shape} + {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _finish("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish("sum_all", (a,), np.array([[a.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def take_rows(a: Tensor, rows) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexOutOfRange(f"row index outside [0, {a.shape[0]})")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _finish("take_rows", (a,), a.data[idx].reshape(len(idx), shape[1]), vjp)


class Segments:
    """Groups of source rows in CSR form: group g owns indices[indptr[g]:indptr[g+1]]."""

    __slots__ = ("indices", "indptr", "segment_ids", "counts")

    def __init__(self, indices: np.ndarray, indptr: np.ndarray):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.counts = np.diff(self.indptr)
        self.segment_ids = np.repeat(np.arange(len(self.counts)), self.counts)

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "Segments":
        counts = [len(g) for g in groups]
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flat = [i for g in groups for i in g]
        return cls(np.asarray(flat, dtype=np.int64), indptr)

    @classmethod
    def from_edges(cls, src: np.ndarray, dst: np.ndarray, n_dst: int) -> "Segments":
        order = np.argsort(dst, kind="stable")
        counts = np.bincount(dst, minlength=n_dst) if len(dst) else np.zeros(n_dst, dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(np.asarray(src)[order], indptr)

    @property
    def n_groups(self) -> int:
        return len(self.counts)


def segment_aggregate(src: Tensor, groups, mode: str = "mean") -> Tensor:
    seg = groups if isinstance(groups, Segments) else Segments.from_groups(groups)
    n_rows, cols = src.shape
    if seg.indices.size and (seg.indices.min() < 0 or seg.indices.max() >= n_rows):
        raise IndexOutOfRange(f"group index outside [0, {n_rows})")
    gathered = src.data[seg.indices]
    out = np.zeros((seg.n_groups, cols))
    nonempty = seg.counts > 0

    if mode in ("sum", "mean"):
        np.add.at(out, seg.segment_ids, gathered)
        denom = np.where(nonempty, seg.counts, 1).astype(np.float64)[:, None] if mode == "mean" else None
        if denom is not None:
            out = out / denom

        def vjp(g):
            gs = g / denom if denom is not None else g
            grad = np.zeros((n_rows, cols))
            np.add.at(grad, seg.indices, gs[seg.segment_ids])
            return (grad,)
        return _finish(f"segment_{mode}", (src,), out, vjp)

    if mode == "max":
        best = np.full((seg.n_groups, cols), -np.inf)
        np.maximum.at(best, seg.segment_ids, gathered)
        out = np.where(nonempty[:, None], best, 0.0)
        # ties route to the lowest source row
        is_max = gathered == best[seg.segment_ids]
        sentinel = np.iinfo(np.int64).max
        winner = np.full((seg.n_groups, cols), sentinel, dtype=np.int64)
        np.minimum.at(winner, seg.segment_ids, np.where(is_max, seg.indices[:, None], sentinel))

        def vjp(g):
            grad = np.zeros((n_rows, cols))
            valid = winner != sentinel
            gi, ci = np.nonzero(valid)
            np.add.at(grad, (winner[gi, ci], ci), g[gi, ci])
            return (grad,)
        return _finish("segment_max", (src,), out, vjp)

    raise ValueError(f"unknown aggregation mode {mode!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if len(t) != n or n == 0 or (t.size and (t.min() < 0 or t.max() >= c)):
        raise ShapeMismatch(f"cross entropy over {logits.shape} logits with {len(t)} targets")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(n), t]
    loss = np.array([[max(nll.mean(), 0.0)]])

    def vjp(g):
        p = softmax(logits.data)
        p[np.arange(n), t] -= 1.0
        return (p * (g[0, 0] / n),)
    return _finish("softmax_cross_entropy", (logits,), loss, vjp)


def l1_loss(pred: Tensor, target) -> Tensor:
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if y.size == pred.data.size:
        y = y.reshape(pred.shape)
    if y.shape != pred.shape or pred.shape[0] == 0:
        raise ShapeMismatch(f"l1 over {pred.shape} vs {y.shape}")
    n = pred.shape[0]
    diff = pred.data - y
    loss = np.array([[np.abs(diff).sum() / n]])
    return _finish("l1_loss", (pred,), loss, lambda g: (np.sign(diff) * (g[0, 0] / n),))


def backward(loss: Tensor) -> None:
    if loss.shape != (1, 1):
        raise ShapeMismatch(f"backward needs a 1×1 loss, got {loss.shape}")
    if loss._node is None:
        # constant: no parameter ancestry, nothing to accumulate
        return
    tape, start = loss._node
    adjoint: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    params: Dict[int, Parameter] = {}
    for node in reversed(tape.nodes[: start.index + 1]):
        g = adjoint.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            adjoint[key] = adjoint[key] + gi if key in adjoint else gi
            if isinstance(inp, Parameter):
                params[key] = inp
    for key, p in params.items():
        p.grad += adjoint[key]
