"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every array is a plain numpy float64 buffer.  Operations that participate in
differentiation append a record (output tensor, backward closure) to a
thread-local :class:`GradientTape`; :func:`backward` replays the tape in
reverse, accumulating gradients additively into ``Tensor.grad`` buffers, and
clears the tape when done.

Broadcasting is deliberately narrow: same shape, scalar-with-tensor, a
row vector against a matrix, or a column vector against a matrix.  That is
everything the tracker needs (bias rows, per-row masks, scalar constants);
anything else raises :class:`~gsat.errors.DimensionError`.

A tape and its tensors belong to one thread.  Independent model instances may
run on separate threads, each with its own thread-local tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, InvalidMaskError


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradientTape:
    """Ordered record of executed operations for one reverse pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def clear(self) -> None:
        self._records.clear()

    def __len__(self) -> int:
        return len(self._records)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = GradientTape()
        self.enabled = True


_STATE = _ThreadState()


def active_tape() -> GradientTape:
    return _STATE.tape


def grad_enabled() -> bool:
    return _STATE.enabled


@contextmanager
def no_grad():
    """Disable tape recording within the block (inference / benchmarking)."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _register(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _STATE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STATE.tape.record(out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Run the reverse pass from a scalar loss and clear the tape.

    Gradients accumulate additively, so a tensor used on several paths
    receives the sum of its path gradients.  Records whose output never
    received a gradient (dead branches) are skipped, leaving their inputs'
    ``grad`` absent.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _STATE.tape
    try:
        loss._accumulate(np.ones_like(loss.data))
        for out, fn in reversed(tape._records):
            if out.grad is not None:
                fn(out.grad)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) <= 2 and len(sb) <= 2:
        try:
            np.broadcast_shapes(sa, sb)
            return
        except ValueError:
            pass
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source tensor."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.shape))

    return _register(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g, b.shape))

    return _register(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.shape))

    return _register(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _register(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _register(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _register(out, (a,), bw)


# ---------------------------------------------------------------------------
# activations and pointwise functions
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - y * y))

    return _register(out, (a,), bw)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Plain numpy sigmoid, stable for large |x|; shared with inference paths."""
    pos = x >= 0
    y = np.empty_like(x)
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_values(a.data)
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    return _register(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g):
        if a.requires_grad:
            # subgradient 0 at the kink
            a._accumulate(g * (a.data > 0.0))

    return _register(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _register(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _register(out, (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean())

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape))

    return _register(out, (a,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty tensor list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _register(out, tuple(tensors), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-d tensor, got {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _register(out, (a,), bw)


# ---------------------------------------------------------------------------
# lookups
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"token id out of range [0, {table.shape[0]}): {int(ids.min())}..{int(ids.max())}"
        )
    out = Tensor(table.data[ids])

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _register(out, (table,), bw)


def embedding_bag(table: Tensor, flat_ids: np.ndarray, offsets: np.ndarray) -> Tensor:
    """Sum of embedding rows per bag; bag ``j`` covers ``flat_ids[offsets[j]:offsets[j+1]]``.

    Used for multi-token slot values, whose token embeddings are summed into
    a single vector.  Every bag must be non-empty.
    """
    flat_ids = np.asarray(flat_ids)
    offsets = np.asarray(offsets)
    n_bags = len(offsets) - 1
    counts = np.diff(offsets)
    if (counts <= 0).any():
        raise ContractError("embedding_bag: empty bag")
    if flat_ids.size and (flat_ids.min() < 0 or flat_ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    rows = table.data[flat_ids]
    data = np.add.reduceat(rows, offsets[:-1], axis=0)
    out = Tensor(data)
    bag_of_token = np.repeat(np.arange(n_bags), counts)

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, flat_ids, g[bag_of_token])

    return _register(out, (table,), bw)


# ---------------------------------------------------------------------------
# softmax / losses / dropout
# ---------------------------------------------------------------------------

def masked_softmax_values(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Numerically stable softmax over the last axis with optional mask.

    Masked positions receive exactly 0; unmasked positions are positive and
    sum to 1 per row.  Plain numpy helper shared by the tape op and by
    inference-only paths.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("softmax mask leaves a row with no unmasked position")
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    z = np.where(mask, x - m, 0.0)
    e = np.exp(z) * mask
    return e / e.sum(axis=-1, keepdims=True)


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    p = masked_softmax_values(x.data, mask)
    out = Tensor(p)

    def bw(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            x._accumulate(p * (g - dot))

    return _register(out, (x,), bw)


def cross_entropy_with_logits(
    logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None
) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``; rows with ``valid=False`` give 0."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    rows = np.arange(x.shape[0])
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    losses = lse - x[rows, targets]
    if valid is not None:
        losses = np.where(valid, losses, 0.0)
    out = Tensor(losses)

    def bw(g):
        if logits.requires_grad:
            p = np.exp(x - m)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, targets] -= 1.0
            if valid is not None:
                p *= valid[:, None]
            logits._accumulate(p * g[:, None])

    return _register(out, (logits,), bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise BCE against 0/1 targets, stable for large |logit|."""
    targets = np.asarray(targets, dtype=np.float64)
    x = logits.data
    losses = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(losses)

    def bw(g):
        if logits.requires_grad:
            logits._accumulate((sigmoid_values(x) - targets) * g)

    return _register(out, (logits,), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors.

    Inference mode (or rate 0) returns the input unchanged, keeping the
    prediction path branch-free.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _register(out, (x,), bw)
