"""Dense tensors with reverse-mode automatic differentiation.

Just enough array machinery to train small transformers on a CPU: float32 or
float64 storage on top of numpy, a Tape that records executed operations, and
backward rules for the handful of ops the models need. Broadcasting is limited
to leading batch dimensions plus trailing bias/mask broadcast; this is not a
general array library.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# Additive attention-mask sentinel. A true -inf turns into NaN under 32-bit
# max-subtraction, so masking saturates at -1e9 instead; exp() still
# underflows to exactly 0 after the shift.
MASK_SENTINEL = -1e9
_FULLY_MASKED = -1e8  # rows whose every entry sits below this are "empty"


class TensorError(ValueError):
    """Shape or contract violation in a tensor operation."""


class Diagnostics:
    """Counters for numerically degenerate events worth surfacing."""

    def __init__(self):
        self.empty_softmax_rows = 0

    def reset(self):
        self.empty_softmax_rows = 0


diagnostics = Diagnostics()


class FlopCounter:
    """Accumulates 2*M*N*K for every matrix product run while active.

    Only matmul contributes; bias adds, activations, norms, softmax and
    lookups are deliberately not counted.
    """

    def __init__(self):
        self.total = 0

    def add_matmul(self, batch: int, m: int, n: int, k: int):
        self.total += 2 * batch * m * n * k

    def __enter__(self):
        self._token = _active_counter.set(self)
        return self

    def __exit__(self, *exc):
        _active_counter.reset(self._token)
        return False


_active_counter: contextvars.ContextVar[Optional[FlopCounter]] = contextvars.ContextVar(
    "masklab_flop_counter", default=None
)


class Tensor:
    """A dense float array plus an optional gradient accumulator.

    Values are treated as immutable once constructed; only ``grad`` mutates
    (and parameter data, between forward/backward passes, by the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Tape:
    """Execution-ordered record of differentiable ops for one backward pass.

    Ops append themselves as they run, so the record is already in
    topological order; ``backward`` walks it once, in reverse.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False

    def __len__(self):
        return len(self._records)


_active_tape: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "masklab_tape", default=None
)


def backward(loss: Tensor, tape: Tape):
    """Populate gradients of everything on the tape that fed ``loss``.

    Gradients accumulate (sum) across multiple uses of a tensor. A tape can
    be walked once; running backward on it again is an error.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward seed must be a scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise TensorError("tape already backpropagated; build a fresh graph before calling again")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape._records):
        if out.grad is None:  # branch that never reached the seed
            continue
        backward_fn(out.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after a broadcasted forward op."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fns) -> Tensor:
    """Build an op output and record its backward rule on the active tape.

    ``grad_fns[i]`` maps the output gradient to parent i's gradient
    contribution (already shaped like the parent); None marks a parent that
    never receives gradient.
    """
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape.get()
    if requires and tape is not None:

        def backward_fn(g, parents=tuple(parents), grad_fns=tuple(grad_fns)):
            for parent, fn in zip(parents, grad_fns):
                if fn is None or not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib

        tape._records.append((out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor or a python/numpy scalar."""
    if isinstance(b, Tensor):
        return _make(
            a.data * b.data,
            (a, b),
            (
                lambda g: _unbroadcast(g * b.data, a.data.shape),
                lambda g: _unbroadcast(g * a.data, b.data.shape),
            ),
        )
    scale = a.data.dtype.type(b)
    return _make(a.data * scale, (a,), (lambda g: g * scale,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch extents must agree or broadcast from 1. Gradients:
    dL/da = g @ b^T and dL/db = a^T @ g, summed over broadcast batch axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise TensorError(f"matmul needs 2-D+ operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise TensorError(f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise TensorError(f"matmul batch extents disagree: {a.data.shape} x {b.data.shape}") from exc

    counter = _active_counter.get()
    if counter is not None:
        batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
        counter.add_matmul(batch, data.shape[-2], data.shape[-1], a.data.shape[-1])

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _make(data, (a, b), (grad_a, grad_b))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), (lambda g: g.transpose(inverse),))


def transpose_last2(x: Tensor) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def sum_all(x: Tensor) -> Tensor:
    return _make(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        (lambda g: np.broadcast_to(g, x.data.shape).copy(),),
    )


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    data = 0.5 * z * (1.0 + t)

    def grad_x(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
        return g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * dinner)

    return _make(data.astype(z.dtype, copy=False), (x,), (grad_x,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), (lambda g: g * (1.0 - t**2),))


def softmax_lastdim(x: Tensor, additive_mask: Optional[Tensor] = None) -> Tensor:
    """Max-stabilized softmax over the last axis.

    ``additive_mask`` entries are 0 (attendable) or MASK_SENTINEL; masked
    positions come out with probability exactly 0. A row in which everything
    is masked yields all zeros and bumps ``diagnostics.empty_softmax_rows``.
    """
    z = x.data
    if additive_mask is not None:
        mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        z = z + mask.astype(z.dtype, copy=False)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    if additive_mask is not None:
        empty = np.broadcast_to(mask <= _FULLY_MASKED, z.shape).all(axis=-1)
        if empty.any():
            p = np.where(empty[..., None], 0.0, p).astype(z.dtype, copy=False)
            diagnostics.empty_softmax_rows += int(empty.sum())

    def grad_x(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, (x,), (grad_x,))


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise TensorError(f"layer_norm eps must be positive, got {eps}")
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    centered = z - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + z.dtype.type(eps))
    xhat = centered * inv
    data = xhat * gain.data + offset.data
    d = z.shape[-1]

    def grad_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def grad_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_offset(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(data, (x, gain, offset), (grad_x, grad_gain, grad_offset))


# ---------------------------------------------------------------------------
# gathers and scatters


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; gradient scatters additively into the rows."""
    ids = np.asarray(ids)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].ravel()[0]
        raise IndexError(f"id {bad} outside table with {vocab} rows")
    data = table.data[ids]

    def grad_table(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.data.shape[1]))
        return gt

    return _make(data, (table,), (grad_table,))


def gather_positions(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows along axis 1: x[B, n, d] gathered by index[B, m] -> [B, m, d]."""
    index = np.asarray(index)
    batch = np.arange(x.data.shape[0])[:, None]
    data = x.data[batch, index]

    def grad_x(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, index), g)
        return gx

    return _make(data, (x,), (grad_x,))


def scatter_positions(values: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Place values[B, m, d] at index[B, m] inside a zero [B, length, d] grid.

    Duplicate indices within a row sum; callers here always use disjoint
    index sets.
    """
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= length):
        raise IndexError(f"scatter index outside [0, {length})")
    b, _, d = values.data.shape
    batch = np.arange(b)[:, None]
    data = np.zeros((b, length, d), dtype=values.data.dtype)
    np.add.at(data, (batch, index), values.data)

    def grad_values(g):
        return g[batch, index]

    return _make(data, (values,), (grad_values,))


def broadcast_rows(vector: Tensor, batch: int, rows: int) -> Tensor:
    """Tile a [d] vector into [batch, rows, d]; gradient sums back."""
    data = np.broadcast_to(vector.data, (batch, rows, vector.data.shape[0])).copy()
    return _make(data, (vector,), (lambda g: g.sum(axis=(0, 1)),))


# ---------------------------------------------------------------------------
# loss


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is true.

    Unmasked positions contribute exactly zero loss and zero gradient.
    Raises if the mask selects nothing (a batch with no corrupted tokens).
    """
    targets = np.asarray(targets)
    mask = np.asarray(loss_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TensorError("loss mask selects no positions")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def grad_logits(g):
        grad = np.exp(logp)
        grid = np.indices(targets.shape)
        grad[(*grid, targets)] -= 1.0
        grad *= mask[..., None]
        return (g * grad / count).astype(z.dtype, copy=False)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), (grad_logits,))
