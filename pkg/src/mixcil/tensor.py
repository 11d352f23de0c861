"""Dense float64 tensors with an explicit gradient tape.

Values are numpy arrays, always float64 and row-major. There is no
implicit broadcasting: elementwise operations demand equal shapes, the
only exception being ``add_bias`` which adds one bias row to every row
of a matrix. Every public operation validates operand shapes eagerly
and rejects non-finite results.

Gradient recording is explicit. Operations executed inside a
``with GradTape() as tape:`` block append one entry each; ``reverse_pass``
replays the entries exactly once, newest first, accumulating adjoints.
Tensors created while no tape is active (or inside ``no_grad``) are
constants. Backward closures capture the operand arrays by reference,
so a tape must be replayed before parameter values are overwritten.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "GradTape",
    "NumericError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "add",
    "add_bias",
    "ema_update",
    "finite_difference_check",
    "gather_rows",
    "init_sgd",
    "interleave_rows",
    "matmul",
    "mean_all",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reverse_pass",
    "row_normalize",
    "scale",
    "sgd_momentum_step",
    "shift",
    "soft_target_cross_entropy",
    "softmax_cross_entropy",
    "sub",
    "sum_all",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


_tensor_ids = itertools.count()


class Tensor:
    """A dense float64 array plus the identity the tape tracks it by."""

    __slots__ = ("values", "tid")

    def __init__(self, values) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.tid = next(_tensor_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _TapeEntry:
    out_tid: int
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


_TAPE_STACK: list["GradTape | None"] = []


def _active_tape() -> "GradTape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """Ordered record of executed primitives, replayed in exact reverse."""

    def __init__(self) -> None:
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")

    def __len__(self) -> int:
        return len(self.entries)

    def gradients(self, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        return reverse_pass(self, loss, leaves)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; operations inside compute values only."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def reverse_pass(tape: GradTape, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf, zeros if unreached."""
    if loss.values.shape != ():
        raise ShapeError(f"reverse_pass needs a scalar root, got shape {loss.values.shape}")
    adjoints: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=np.float64)}
    for entry in reversed(tape.entries):
        g_out = adjoints.get(entry.out_tid)
        if g_out is None:
            continue
        for tensor, g_in in zip(entry.inputs, entry.backward(g_out)):
            if g_in is None:
                continue
            held = adjoints.get(tensor.tid)
            adjoints[tensor.tid] = g_in if held is None else held + g_in
    return [adjoints.get(leaf.tid, np.zeros_like(leaf.values)) for leaf in leaves]


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op} produced non-finite values")


def _emit(values: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(values, op)
    out = Tensor(values)
    tape = _active_tape()
    if tape is not None:
        tape.entries.append(_TapeEntry(out.tid, inputs, backward))
    return out


def _need_matrix(x: Tensor, op: str) -> np.ndarray:
    if x.values.ndim != 2:
        raise ShapeError(f"{op} needs a 2-d operand, got shape {x.shape}")
    return x.values


def _need_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av = _need_matrix(a, "matmul")
    bv = _need_matrix(b, "matmul")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, "matmul", (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    xv = _need_matrix(x, "transpose")

    def backward(g):
        return (g.T,)

    return _emit(xv.T.copy(), "transpose", (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "add")

    def backward(g):
        return g, g

    return _emit(a.values + b.values, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "sub")

    def backward(g):
        return g, -g

    return _emit(a.values - b.values, "sub", (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add one bias row to every row of a matrix."""
    xv = _need_matrix(x, "add_bias")
    bv = bias.values
    if bv.ndim == 2 and bv.shape[0] == 1:
        bv = bv[0]
    if bv.ndim != 1 or bv.shape[0] != xv.shape[1]:
        raise ShapeError(f"add_bias needs a bias row of width {xv.shape[1]}, got {bias.shape}")

    def backward(g):
        gb = g.sum(axis=0)
        return g, gb.reshape(bias.shape)

    return _emit(xv + bv, "add_bias", (x, bias), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return g * bv, g * av

    return _emit(av * bv, "mul", (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _emit(x.values * factor, "scale", (x,), backward)


def shift(x: Tensor, offset: float) -> Tensor:
    offset = float(offset)

    def backward(g):
        return (g,)

    return _emit(x.values + offset, "shift", (x,), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    xv = x.values

    def backward(g):
        return (g * (xv > 0.0),)

    return _emit(np.maximum(xv, 0.0), "relu", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(x.values, float(g)),)

    return _emit(np.asarray(x.values.sum()), "sum_all", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean_all over an empty tensor")
    n = x.size

    def backward(g):
        return (np.full_like(x.values, float(g) / n),)

    return _emit(np.asarray(x.values.mean()), "mean_all", (x,), backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    xv = _need_matrix(x, "gather_rows")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a 1-d index array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
        raise IndexError(f"gather_rows index out of range for {xv.shape[0]} rows")

    def backward(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(xv[idx], "gather_rows", (x,), backward)


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """Alternate the rows of two equally shaped matrices: a0 b0 a1 b1 ..."""
    av = _need_matrix(a, "interleave_rows")
    bv = _need_matrix(b, "interleave_rows")
    _need_same_shape(a, b, "interleave_rows")
    out = np.empty((2 * av.shape[0], av.shape[1]), dtype=np.float64)
    out[0::2] = av
    out[1::2] = bv

    def backward(g):
        return g[0::2], g[1::2]

    return _emit(out, "interleave_rows", (a, b), backward)


def row_normalize(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm. Zero rows are rejected."""
    xv = _need_matrix(x, "row_normalize")
    norms = np.linalg.norm(xv, axis=1)
    if np.any(norms < 1e-150):
        raise NumericError("row_normalize saw a zero-norm row")
    out = xv / norms[:, None]

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * inner) / norms[:, None],)

    return _emit(out, "row_normalize", (x,), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target column, one target per row."""
    lv = _need_matrix(logits, "softmax_cross_entropy")
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != lv.shape[0]:
        raise ShapeError(f"targets must be one label per row, got shape {t.shape} for logits {logits.shape}")
    if lv.shape[0] == 0:
        raise ShapeError("softmax_cross_entropy over an empty batch")
    if t.min() < 0 or t.max() >= lv.shape[1]:
        raise ValueError(f"label out of range [0, {lv.shape[1]})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = lv.shape[0]
    rows = np.arange(n)
    loss = -log_probs[rows, t].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, t] -= 1.0
        return (grad * (float(g) / n),)

    return _emit(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


def soft_target_cross_entropy(logits: Tensor, weights) -> Tensor:
    """Weighted negative log-softmax, averaged over rows with positive mass.

    ``weights`` carries one non-negative target distribution per row;
    all-zero rows contribute nothing and are excluded from the average.
    """
    lv = _need_matrix(logits, "soft_target_cross_entropy")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != lv.shape:
        raise ShapeError(f"weights shape {w.shape} must match logits shape {logits.shape}")
    if w.size and w.min() < 0.0:
        raise ValueError("weights must be non-negative")
    row_mass = w.sum(axis=1)
    n_active = int((row_mass > 0.0).sum())
    if n_active == 0:
        def backward_zero(g):
            return (np.zeros_like(lv),)

        return _emit(np.asarray(0.0), "soft_target_cross_entropy", (logits,), backward_zero)
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -(w * log_probs).sum() / n_active

    def backward(g):
        grad = np.exp(log_probs) * row_mass[:, None] - w
        return (grad * (float(g) / n_active),)

    return _emit(np.asarray(loss), "soft_target_cross_entropy", (logits,), backward)


@dataclass
class OptimizerState:
    """Velocity buffers for stochastic gradient descent with momentum."""

    learning_rate: float
    momentum: float
    velocities: list[np.ndarray]


def init_sgd(params: Sequence[Tensor], learning_rate: float, momentum: float) -> OptimizerState:
    if learning_rate <= 0.0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    return OptimizerState(
        learning_rate=float(learning_rate),
        momentum=float(momentum),
        velocities=[np.zeros_like(p.values) for p in params],
    )


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In place: v <- momentum * v + g, then p <- p - lr * v."""
    if len(params) != len(state.velocities):
        raise ShapeError("optimizer state does not match the parameter list")
    for p, g, v in zip(params, grads, state.velocities, strict=True):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.values.shape or v.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.values.shape}")
        v *= state.momentum
        v += g
        p.values -= state.learning_rate * v


def ema_update(targets: Sequence[Tensor], sources: Sequence[Tensor], m: float) -> None:
    """In place: t <- m * t + (1 - m) * s, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"ema coefficient must lie in [0, 1], got {m}")
    for t, s in zip(targets, sources, strict=True):
        if t.values.shape != s.values.shape:
            raise ShapeError(f"ema shapes differ: {t.shape} vs {s.shape}")
        if m == 0.0:
            t.values[...] = s.values
        elif m != 1.0:
            t.values[...] = m * t.values + (1.0 - m) * s.values


def finite_difference_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a pure scalar function of the current parameter
    values. Error per coordinate is |g_a - g_fd| / max(1, |g_fd|).
    A precomputed ``analytic`` gradient list can be supplied to check an
    external gradient against the same differences.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if analytic is None:
        with GradTape() as tape:
            loss = fn(params)
        analytic = reverse_pass(tape, loss, params)
    worst = 0.0
    with no_grad():
        for p, g_a in zip(params, analytic, strict=True):
            flat = p.values.reshape(-1)
            ga_flat = np.asarray(g_a, dtype=np.float64).reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = fn(params).item()
                flat[i] = saved - eps
                f_minus = fn(params).item()
                flat[i] = saved
                g_fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(ga_flat[i] - g_fd) / max(1.0, abs(g_fd))
                if err > worst:
                    worst = err
    return worst
