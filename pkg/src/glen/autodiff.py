"""Minimal reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Differentiable ops append one record to
the innermost active :class:`Tape`; :func:`backward` replays the records in
reverse and returns gradients keyed by node id. Sparse operands of
:func:`spmm` are treated as constants, so no gradient ever flows into graph
edge weights.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .sparse import SparseMatrix

DTYPE = np.float64

_node_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


class Tape:
    """Ordered op records: (output id, input ids, gradient function)."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Dense array with an optional tape handle.

    Constants have ``node_id is None``; parameters and recorded op outputs
    carry a unique id that keys their gradient in :func:`backward`.
    """

    __slots__ = ("values", "requires_grad", "node_id")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Register `out` on the active tape when any input carries gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        in_ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        tape.records.append((out.node_id, in_ids, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Replay `tape` in reverse from a scalar `loss`.

    Returns gradients keyed by node id; nodes the loss does not depend on
    are simply absent (their gradient is zero).
    """
    if loss.values.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.values.shape}")
    if loss.node_id is None:
        return {}
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=DTYPE)}
    for out_id, in_ids, grad_fn in reversed(tape.records):
        g = grads.get(out_id)
        if g is None:
            continue
        for node_id, gin in zip(in_ids, grad_fn(g)):
            if node_id is None or gin is None:
                continue
            acc = grads.get(node_id)
            grads[node_id] = gin if acc is None else acc + gin
    return grads


# ---------------------------------------------------------------------------
# dense ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.values + b.values)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.values * b.values)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.values * factor)
    return _record(out, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.values @ b.values)
    return _record(out, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) > 1:
        raise ValueError(
            "concat: leading dimensions differ: "
            + ", ".join(str(t.shape) for t in tensors)
        )
    out = Tensor(np.concatenate([t.values for t in tensors], axis=-1))
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _record(out, tuple(tensors), grad_fn)


def slice_rows(x: Tensor, rows) -> Tensor:
    """Gather rows by index; duplicate indices accumulate gradient."""
    idx = np.asarray(rows, dtype=np.int64)
    out = Tensor(x.values[idx])

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), grad_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.values[:, start:stop])

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return _record(out, (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.values.sum())
    return _record(out, (x,), lambda g: (np.full(x.shape, g, dtype=DTYPE),))


# ---------------------------------------------------------------------------
# activations


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_values(x.values)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, negative_slope * x.values))
    return _record(out, (x,), lambda g: (g * np.where(mask, 1.0, negative_slope),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scaling happens at train time, evaluation is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.values * keep)
    return _record(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# sparse product and segment ops


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse @ dense. Sparse values are constants; gradient flows to x only."""
    if x.values.ndim != 2 or s.n_cols != x.shape[0]:
        raise ValueError(
            f"spmm: sparse shape ({s.n_rows}, {s.n_cols}) does not match dense {x.shape}"
        )
    out = Tensor(s.dot_dense(x.values))
    return _record(out, (x,), lambda g: (s.t_dot_dense(g),))


def _segment_starts(segment_ids: np.ndarray, n: int) -> np.ndarray:
    if segment_ids.shape[0] != n:
        raise ValueError("segment_ids must be as long as the scores")
    if n == 0:
        raise ValueError("segment_softmax: empty input")
    if np.any(np.diff(segment_ids) < 0):
        raise ValueError("segment ids must be contiguous (nondecreasing)")
    uniq = np.unique(segment_ids)
    if segment_ids[0] != 0 or uniq.shape[0] != segment_ids[-1] + 1:
        missing = sorted(set(range(int(segment_ids[-1]) + 1)) - set(uniq.tolist()))
        raise ValueError(f"empty segment(s): {missing}")
    return np.flatnonzero(np.diff(segment_ids, prepend=-1))


def segment_softmax(scores: Tensor, segment_ids) -> Tensor:
    """Softmax within each contiguous segment of `scores` (flat or column)."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    flat = scores.values.reshape(-1)
    starts = _segment_starts(ids, flat.shape[0])
    shifted = flat - np.maximum.reduceat(flat, starts)[ids]
    e = np.exp(shifted)
    p = e / np.add.reduceat(e, starts)[ids]
    out = Tensor(p.reshape(scores.shape))

    def grad_fn(g):
        gf = g.reshape(-1)
        dot = np.add.reduceat(gf * p, starts)[ids]
        return ((p * (gf - dot)).reshape(scores.shape),)

    return _record(out, (scores,), grad_fn)


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of x into `num_segments` buckets given per-row segment ids."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ValueError("segment_ids must be as long as the rows of x")
    out_values = np.zeros((num_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out_values, ids, x.values)
    out = Tensor(out_values)
    return _record(out, (x,), lambda g: (g[ids],))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over rows; targets are class indices."""
    z = logits.values
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {z.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (z.shape[0],):
        raise ValueError(f"expected {z.shape[0]} target indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= z.shape[1]):
        raise ValueError(f"target class out of range [0, {z.shape[1]})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = Tensor(np.mean(lse - z[np.arange(z.shape[0]), idx]))

    def grad_fn(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), idx] -= 1.0
        return (g * p / z.shape[0],)

    return _record(out, (logits,), grad_fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, computed from logits."""
    z = logits.values
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != z.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {z.shape}")
    per_elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(per_elem.mean())

    def grad_fn(g):
        return (g * (_sigmoid_values(z) - t) / z.size,)

    return _record(out, (logits,), grad_fn)


def classification_loss(logits: Tensor, targets, mode: str) -> Tensor:
    if mode == "softmax_ce":
        return softmax_cross_entropy(logits, targets)
    if mode == "per_label_bce":
        return bce_with_logits(logits, targets)
    raise ValueError(f"unknown loss mode {mode!r}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments and step counter, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[int, np.ndarray], state: AdamState
) -> None:
    """One Adam update in place. Parameters without a gradient get g = 0."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(p.node_id)
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        g = np.asarray(g, dtype=DTYPE).reshape(p.values.shape)
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values = p.values - state.lr * (m / bc1) / np.sqrt(v / bc2 + state.eps)
