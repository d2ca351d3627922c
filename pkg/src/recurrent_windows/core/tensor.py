"""Dense float64 arrays with a reverse-mode gradient tape.

Every primitive in this module is a pure function of its inputs. When a
GradTape is active on the current thread, each primitive appends one record
holding its inputs, its output and a vector-Jacobian product (VJP) closure.
``backward`` replays those records in strict reverse order.

Arrays are float64 throughout. GELU defaults to the exact erf form; the tanh
approximation is available with ``approximate=True``.
"""

from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy import special

from ..errors import DimensionError, EmptyLossError, NumericDomainError, TracingError

logger = logging.getLogger(__name__)

_erf = special.erf
_SQRT_2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Immutable row-major float64 array.

    Extents are >= 1; zero-dimensional tensors hold scalars (losses).
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: Optional[str] = None, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"array extents must be >= 1, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        """Read-only view of the payload."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ============================================================
# Tape
# ============================================================


@dataclass(eq=False)
class TapeRecord:
    """One primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered record of primitive applications on one thread.

    Use as a context manager; tapes nest, the innermost one records.
    ``live_scalars`` counts the activation scalars the tape keeps alive.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.watched: dict[str, Tensor] = {}
        self.live_scalars = 0

    def watch(self, tensors: Mapping[str, Tensor]) -> None:
        """Register named leaves whose adjoints ``backward`` reports."""
        self.watched.update(tensors)

    def record(self, record: TapeRecord) -> None:
        self.records.append(record)
        self.live_scalars += record.output.size

    def release(self) -> None:
        """Drop every record (and the activations they keep alive)."""
        self.records.clear()
        self.live_scalars = 0

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _tape_stack() -> list[GradTape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    saved = list(_tape_stack())
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tensor = Tensor(out, copy=False)
    tape = active_tape()
    if tape is not None:
        tape.record(TapeRecord(op, tuple(inputs), tensor, vjp))
    return tensor


def backward(
    tape: GradTape,
    loss: Tensor,
    seeds: Sequence[tuple[Tensor, np.ndarray]] = (),
) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse and return adjoints of the watched leaves.

    Args:
        tape: Tape the loss was computed under
        loss: Scalar output recorded on ``tape``
        seeds: Extra (output, upstream adjoint) pairs, used when a recorded
            value feeds computation outside this tape

    Returns:
        {name: adjoint} for every watched tensor (zeros when unused)

    Raises:
        TracingError: If the loss is not a scalar recorded on the tape
    """
    if loss.size != 1:
        raise TracingError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise TracingError("loss was not recorded on this tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for tensor, grad in seeds:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.shape:
            raise DimensionError(f"seed adjoint shape {grad.shape} != primal shape {tensor.shape}")
        if id(tensor) not in produced:
            raise TracingError(f"seeded {tensor!r} was not recorded on this tape")
        prev = adjoints.get(id(tensor))
        adjoints[id(tensor)] = grad if prev is None else prev + grad

    for record in reversed(tape.records):
        grad_out = adjoints.pop(id(record.output), None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(record.inputs, record.vjp(grad_out)):
            if grad_in is None:
                continue
            key = id(tensor)
            prev = adjoints.get(key)
            adjoints[key] = grad_in if prev is None else prev + grad_in

    return {
        name: adjoints.get(id(tensor), np.zeros(tensor.shape))
        for name, tensor in tape.watched.items()
    }


# ============================================================
# FLOP instrumentation
# ============================================================


class FlopCounter:
    """Tally of multiply-add FLOPs executed by ``matmul`` (2 per MAC)."""

    def __init__(self):
        self.matmul_flops = 0
        self.matmul_calls = 0


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Count matmul FLOPs executed on this thread inside the block."""
    if not hasattr(_local, "counters"):
        _local.counters = []
    counter = FlopCounter()
    _local.counters.append(counter)
    try:
        yield counter
    finally:
        _local.counters.remove(counter)


def _tally_matmul(m: int, n: int, p: int) -> None:
    for counter in getattr(_local, "counters", ()):
        counter.matmul_flops += 2 * m * n * p
        counter.matmul_calls += 1


# ============================================================
# Elementwise and structural primitives
# ============================================================


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of an m×n and an n×p array.

    Raises:
        DimensionError: If either operand is not 2-D or inner extents differ
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    m, n = a.shape
    p = b.shape[1]
    _tally_matmul(m, n, p)
    return _emit(
        "matmul",
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D array, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D array."""
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for shape {a.shape}")

    def vjp(g: np.ndarray):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", (a,), a.data[start:stop], vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D array (or entries of a 1-D one)."""
    if a.ndim not in (1, 2) or not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for shape {a.shape}")

    def vjp(g: np.ndarray):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_cols", (a,), a.data[..., start:stop], vjp)


def _concat(parts: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not parts:
        raise DimensionError(f"{op}: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"{op}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(op, tuple(parts), out, vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, -1, "concat_cols")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` (V×k) for each id."""
    index = np.asarray(ids, dtype=np.int64)
    if index.ndim != 1 or index.size == 0:
        raise DimensionError(f"embedding ids must be a non-empty 1-D sequence, got {index.shape}")

    def vjp(g: np.ndarray):
        full = np.zeros(table.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("embedding", (table,), table.data[index], vjp)


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), np.asarray(a.data.sum()), lambda g: (np.full(a.shape, g),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a 2-D array, kept as a 1×n row."""
    if a.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-D array, got shape {a.shape}")
    rows = a.shape[0]
    return _emit(
        "mean_rows",
        (a,),
        a.data.mean(axis=0, keepdims=True),
        lambda g: (np.broadcast_to(g / rows, a.shape).copy(),),
    )


# ============================================================
# Numeric primitives
# ============================================================


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    Args:
        x: Scores
        mask: Optional boolean array broadcastable to ``x``; False entries get
            probability exactly 0

    Raises:
        NumericDomainError: On non-finite scores or a fully masked row
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError("softmax_rows: non-finite input")
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(allowed.any(axis=-1)):
            raise NumericDomainError("softmax_rows: a row has every entry masked")
        masked = np.where(allowed, x.data, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.where(allowed, np.exp(shifted), 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (x,), probs, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    k = x.shape[-1] if x.ndim else 0
    if k == 0 or gain.shape != (k,) or bias.shape != (k,):
        raise DimensionError(
            f"layer_norm: input {x.shape} incompatible with gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g: np.ndarray):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """x·Φ(x); exact erf form unless ``approximate``."""
    v = x.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (v + 0.044715 * v**3)
        t = np.tanh(inner)
        out = 0.5 * v * (1.0 + t)
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
    else:
        cdf = 0.5 * (1.0 + _erf(v / _SQRT_2))
        out = v * cdf
        deriv = cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return _emit("gelu", (x,), out, lambda g: (g * deriv,))


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    mask: Optional[Sequence[bool]] = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of ``targets`` under row-softmax of ``logits``.

    Args:
        logits: n×V scores
        targets: n token ids
        mask: n booleans; False rows are excluded (default: all included)
        reduction: "mean" over included rows or "sum"

    Raises:
        EmptyLossError: If every row is masked out
        DimensionError: On shape disagreement or an included target >= V
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs n×V logits, got shape {logits.shape}")
    n, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if tgt.shape != (n,) or keep.shape != (n,):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape}, targets {tgt.shape}, mask {keep.shape}"
        )
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked out")
    if np.any((tgt[keep] < 0) | (tgt[keep] >= vocab)):
        raise DimensionError(f"cross_entropy: target outside vocabulary of size {vocab}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    safe_tgt = np.where(keep, tgt, 0)
    nll = -log_probs[np.arange(n), safe_tgt]
    total = float(nll[keep].sum())
    denom = count if reduction == "mean" else 1

    def vjp(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[np.arange(n), safe_tgt] -= 1.0
        grad *= keep[:, None] * (float(g) / denom)
        return (grad,)

    return _emit("cross_entropy", (logits,), np.asarray(total / denom), vjp)


def cross_entropy_mean(
    logits: Tensor, targets: Sequence[int], mask: Optional[Sequence[bool]] = None
) -> Tensor:
    """Mean natural-log NLL over masked-in positions."""
    return cross_entropy(logits, targets, mask, reduction="mean")


__all__ = [
    "Tensor",
    "TapeRecord",
    "GradTape",
    "FlopCounter",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "concat_cols",
    "concat_rows",
    "count_flops",
    "cross_entropy",
    "cross_entropy_mean",
    "embedding",
    "gelu",
    "layer_norm",
    "matmul",
    "mean_rows",
    "mul",
    "no_tape",
    "reshape",
    "scale",
    "slice_cols",
    "slice_rows",
    "softmax_rows",
    "sub",
    "sum_all",
    "transpose",
]
