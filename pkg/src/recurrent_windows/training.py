"""Backpropagation through windows, bottleneck checkpointing and the train loop.

A document's window plan (the same plan evaluation uses) is cut into
sequences of ``windows_per_sequence`` windows. Gradients flow through the
carry across every window boundary inside a sequence. Between sequences the
carry value is passed on but detached, so gradients stop there.

Two ways to get the same gradients:
    bptt_sequence_step       one tape over the whole sequence
    checkpointed_backward    forward sweep keeps only (z, h_prev) per window;
                             the backward sweep re-runs each window under its
                             own tape and seeds it with the carry adjoint
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .core.optim import Adam, clip_by_global_norm
from .core.rng import Rng
from .core.tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    cross_entropy,
    no_tape,
    scale,
    slice_rows,
)
from .errors import DivergenceError, InputError
from .model import ModelConfig, Params, WindowActivations, forward_window
from .recurrence import recurrence_step
from .windowing import ExecutionMode, WindowSpec, check_overlap, evaluate_corpus, make_plan

logger = logging.getLogger(__name__)

CARRY_LEAF = "carry.in"
PAD_ID = 0


class Checkpointing(str, Enum):
    FULL = "full"
    BOTTLENECK = "bottleneck"


@dataclass
class TrainConfig:
    """Fine-tuning protocol. Defaults follow the 20×300-token, 2-epoch recipe."""

    window: int = 300
    overlap: int = 0
    windows_per_sequence: int = 20
    lr: float = 1e-4
    warmup_steps: int = 100
    epochs: int = 2
    validate_every_tokens: int = 2_000_000
    seed: int = 0
    checkpointing: Checkpointing = Checkpointing.BOTTLENECK
    recurrent: bool = True
    grad_clip: Optional[float] = 1.0
    batch_size: int = 1
    max_steps: Optional[int] = None
    record_wallclock: bool = False

    def __post_init__(self):
        self.checkpointing = Checkpointing(self.checkpointing)

    @property
    def mode(self) -> ExecutionMode:
        return ExecutionMode.RECURRENT if self.recurrent else ExecutionMode.BASELINE

    def validate(self) -> list[str]:
        errors = []
        if self.window < 1:
            errors.append("train.window: must be >= 1")
        elif not 0 <= self.overlap < self.window:
            errors.append(f"train.overlap: {self.overlap} must lie in 0..{self.window - 1}")
        if self.windows_per_sequence < 1:
            errors.append("train.windows_per_sequence: must be >= 1")
        if self.warmup_steps < 0:
            errors.append("train.warmup_steps: must be >= 0")
        if self.lr < 0:
            errors.append("train.lr: must be >= 0")
        if self.epochs < 1:
            errors.append("train.epochs: must be >= 1")
        if self.validate_every_tokens < 1:
            errors.append("train.validate_every_tokens: must be >= 1")
        if self.batch_size < 1:
            errors.append("train.batch_size: must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            errors.append("train.max_steps: must be >= 1 when set")
        return errors


# ============================================================
# Sequences
# ============================================================


@dataclass
class TrainingSequence:
    """Consecutive windows of one document, with absolute 1-based spans.

    With ``pad_to`` set, windows shorter than ``pad_to`` (only a document's
    final window can be) are right-padded with ``PAD_ID``. Padded positions
    follow every scored row, so causal attention keeps them out of the loss,
    and the carry is pooled over the real positions only.
    """

    tokens: np.ndarray
    windows: tuple[WindowSpec, ...]
    recurrent: bool
    initial_carry: Optional[np.ndarray] = None
    pad_to: Optional[int] = None

    @property
    def scored_tokens(self) -> int:
        return sum(w.scored_count for w in self.windows)

    @property
    def padded_positions(self) -> int:
        if self.pad_to is None:
            return 0
        return sum(max(0, self.pad_to - w.length) for w in self.windows)


def split_sequences(
    tokens: Sequence[int], config: TrainConfig, pad: bool = False
) -> list[TrainingSequence]:
    """Cut a document's evaluation plan into training sequences.

    Raises:
        InputError: Document too short to score a single target
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size < 2:
        raise InputError(f"a training sequence needs at least 2 tokens, got {ids.size}")
    plan = make_plan(int(ids.size), config.window, config.overlap, config.mode)
    step = config.windows_per_sequence
    return [
        TrainingSequence(
            tokens=ids,
            windows=plan.windows[i : i + step],
            recurrent=config.recurrent,
            pad_to=config.window if pad else None,
        )
        for i in range(0, len(plan.windows), step)
    ]


@dataclass
class StepStats:
    window_forwards: int = 0
    retained_scalars: int = 0
    peak_live_scalars: int = 0


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    scored_tokens: int
    final_carry: Optional[np.ndarray]
    stats: StepStats


def _check_sequence(seq: TrainingSequence) -> None:
    if not seq.windows:
        raise InputError("training sequence holds no window")


def _scored_nll(acts, spec: WindowSpec, tokens: np.ndarray) -> Tensor:
    lo, hi = spec.logit_rows()
    targets = tokens[spec.scored_span[0] - 1 : spec.scored_span[1]]
    return cross_entropy(slice_rows(acts.logits, lo, hi), targets, reduction="sum")


def _window_tokens(spec: WindowSpec, seq: TrainingSequence) -> np.ndarray:
    a, b = spec.input_span
    ids = seq.tokens[a - 1 : b]
    if seq.pad_to is not None and ids.size < seq.pad_to:
        ids = np.concatenate([ids, np.full(seq.pad_to - ids.size, PAD_ID, dtype=np.int64)])
    return ids


def _carry_step(
    acts: WindowActivations, spec: WindowSpec, config: ModelConfig, params: Params, index: int
):
    if acts.length > spec.length:
        acts = WindowActivations(
            hiddens=[slice_rows(h, 0, spec.length) for h in acts.hiddens],
            logits=slice_rows(acts.logits, 0, spec.length),
        )
    return recurrence_step(acts, config, params, index)


def bptt_sequence_step(seq: TrainingSequence, config: ModelConfig, params: Params) -> StepResult:
    """Loss and gradients over one sequence with a single tape (full BPTT).

    Loss is the mean NLL over all scored targets of all windows.
    """
    _check_sequence(seq)
    count = seq.scored_tokens
    carry = Tensor(seq.initial_carry) if seq.recurrent and seq.initial_carry is not None else None
    stats = StepStats()

    with GradTape() as tape:
        tape.watch(params)
        total = None
        for index, spec in enumerate(seq.windows):
            acts = forward_window(_window_tokens(spec, seq), carry, config, params)
            stats.window_forwards += 1
            nll = _scored_nll(acts, spec, seq.tokens)
            total = nll if total is None else add(total, nll)
            if seq.recurrent:
                carry = _carry_step(acts, spec, config, params, index + 1).h_prev
        loss = scale(total, 1.0 / count)
        stats.peak_live_scalars = tape.live_scalars

    grads = backward(tape, loss)
    tape.release()
    final_carry = carry.numpy() if carry is not None else None
    return StepResult(loss.item(), grads, count, final_carry, stats)


@dataclass
class CheckpointStore:
    """Per-window (z, h_prev) retained between the forward and backward sweeps."""

    z: list[np.ndarray] = field(default_factory=list)
    h_prev: list[np.ndarray] = field(default_factory=list)

    def push(self, z: np.ndarray, h_prev: np.ndarray) -> None:
        self.z.append(z)
        self.h_prev.append(h_prev)

    @property
    def retained_scalars(self) -> int:
        return sum(v.size for v in self.z) + sum(v.size for v in self.h_prev)

    def __len__(self) -> int:
        return len(self.h_prev)


def checkpointed_backward(seq: TrainingSequence, config: ModelConfig, params: Params) -> StepResult:
    """Same gradients as ``bptt_sequence_step`` with bottlenecked activation memory.

    The forward sweep runs untaped and retains only 2k scalars per window.
    The backward sweep recomputes each window once, last to first.
    """
    _check_sequence(seq)
    count = seq.scored_tokens
    tokens = seq.tokens
    stats = StepStats()
    store = CheckpointStore()
    initial = seq.initial_carry if seq.recurrent else None

    total_nll = 0.0
    with no_tape():
        carry = initial
        for index, spec in enumerate(seq.windows):
            acts = forward_window(_window_tokens(spec, seq), carry, config, params)
            stats.window_forwards += 1
            total_nll += _scored_nll(acts, spec, tokens).item()
            if seq.recurrent:
                state = _carry_step(acts, spec, config, params, index + 1)
                store.push(state.z.numpy(), state.h_prev.numpy())
                carry = store.h_prev[-1]
    stats.retained_scalars = store.retained_scalars

    grads = {name: np.zeros(p.shape) for name, p in params.items()}
    carry_adjoint: Optional[np.ndarray] = None
    last = len(seq.windows) - 1
    for index in range(last, -1, -1):
        spec = seq.windows[index]
        carry_in = store.h_prev[index - 1] if index > 0 and seq.recurrent else initial
        with GradTape() as tape:
            tape.watch(params)
            carry_t = None
            if carry_in is not None:
                carry_t = Tensor(carry_in, name=CARRY_LEAF)
                tape.watch({CARRY_LEAF: carry_t})
            acts = forward_window(_window_tokens(spec, seq), carry_t, config, params)
            stats.window_forwards += 1
            local_loss = scale(_scored_nll(acts, spec, tokens), 1.0 / count)
            seeds = []
            if seq.recurrent and index < last and carry_adjoint is not None:
                h_prev = _carry_step(acts, spec, config, params, index + 1).h_prev
                seeds.append((h_prev, carry_adjoint))
            stats.peak_live_scalars = max(
                stats.peak_live_scalars, tape.live_scalars + store.retained_scalars
            )
        local = backward(tape, local_loss, seeds)
        tape.release()
        carry_adjoint = local.pop(CARRY_LEAF, None)
        for name, g in local.items():
            grads[name] += g

    final_carry = store.h_prev[-1] if seq.recurrent and len(store) else None
    return StepResult(total_nll / count, grads, count, final_carry, stats)


def measure_window_footprint(config: ModelConfig, params: Params, T: int) -> int:
    """Live activation scalars of one taped window with carry, loss and recurrence (M)."""
    tokens = np.arange(T, dtype=np.int64) % config.vocab_size
    with GradTape() as tape:
        carry = Tensor(np.zeros(config.hidden))
        tape.watch({CARRY_LEAF: carry})
        acts = forward_window(tokens, carry, config, params)
        logits = slice_rows(acts.logits, 0, T)
        scale(cross_entropy(logits, np.append(tokens[1:], 0), reduction="sum"), 1.0)
        if any(n.startswith("recurrence.") for n in params):
            recurrence_step(acts, config, params, 1)
        footprint = tape.live_scalars
    tape.release()
    logger.debug(f"Window footprint for T={T}: {footprint} scalars")
    return footprint


def sequence_step(seq: TrainingSequence, config: ModelConfig, params: Params, mode: Checkpointing) -> StepResult:
    if mode is Checkpointing.BOTTLENECK:
        return checkpointed_backward(seq, config, params)
    return bptt_sequence_step(seq, config, params)


# ============================================================
# Schedule and loop
# ============================================================


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``config.lr`` over ``warmup_steps``, then constant."""
    if step < 1:
        raise InputError(f"steps count from 1, got {step}")
    if config.warmup_steps == 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def param_arrays(params: Params) -> dict[str, np.ndarray]:
    return {name: p.numpy() for name, p in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {name: Tensor(value, name=name) for name, value in arrays.items()}


def accumulate(batch: Sequence[StepResult]) -> tuple[float, dict[str, np.ndarray]]:
    """Token-mean NLL of a batch and its gradient.

    Each sequence's gradient is a per-token mean, so it is weighted by its
    share of the scored tokens.
    """
    if not batch:
        raise InputError("cannot accumulate an empty batch")
    scored = sum(r.scored_tokens for r in batch)
    train_nll = sum(r.loss * r.scored_tokens for r in batch) / scored
    grads = {
        name: sum(r.grads[name] * r.scored_tokens for r in batch) / scored
        for name in batch[0].grads
    }
    return train_nll, grads


@dataclass
class TrainRecord:
    step: int
    tokens_seen: int
    lr: float
    train_nll: float
    val_nll: Optional[float] = None
    wallclock_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "tokens_seen": self.tokens_seen,
            "lr": self.lr,
            "train_nll": self.train_nll,
            "val_nll": self.val_nll,
            "wallclock_ms": self.wallclock_ms,
        }


@dataclass
class LoopState:
    """Where the loop stands at a document boundary."""

    epoch: int = 0
    doc_cursor: int = 0
    step: int = 0
    tokens_seen: int = 0
    next_validation: int = 0
    best_val_nll: float = math.inf

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"loop.{name}": np.array([float(getattr(self, name))])
            for name in ("epoch", "doc_cursor", "step", "tokens_seen", "next_validation", "best_val_nll")
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "LoopState":
        return cls(
            epoch=int(arrays["loop.epoch"][0]),
            doc_cursor=int(arrays["loop.doc_cursor"][0]),
            step=int(arrays["loop.step"][0]),
            tokens_seen=int(arrays["loop.tokens_seen"][0]),
            next_validation=int(arrays["loop.next_validation"][0]),
            best_val_nll=float(arrays["loop.best_val_nll"][0]),
        )


@dataclass
class TrainResult:
    params: Params
    best_params: Params
    best_val_nll: float
    records: list[TrainRecord]
    state: LoopState


def validation_nll(config: ModelConfig, params: Params, documents: Sequence, train: TrainConfig) -> float:
    """Mean NLL per scored token on the validation documents, under the training plan."""
    report = evaluate_corpus(config, params, documents, train.window, train.overlap, train.mode)
    return report.mean_nll


def train_loop(
    train_docs: Sequence,
    valid_docs: Sequence,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Params,
    *,
    optimizer: Optional[Adam] = None,
    state: Optional[LoopState] = None,
    best_params: Optional[Params] = None,
    on_record: Optional[Callable[[TrainRecord], None]] = None,
    on_document_end: Optional[Callable[[LoopState, Params, Adam, Params], None]] = None,
) -> TrainResult:
    """Fine-tune ``params`` in groups of ``batch_size`` documents.

    The documents of a group advance side by side, one sequence each per
    optimizer step, and each keeps its own carry chain. A document that runs
    out of sequences drops out of the group's remaining steps. Validation
    runs whenever ``validate_every_tokens`` more scored tokens have been
    trained on, and once at the end; the lowest-validation snapshot is
    kept. Passing ``optimizer``/``state``/``best_params`` saved by
    ``on_document_end`` resumes a run exactly.

    Raises:
        InputError: Empty train or validation corpus
        DivergenceError: Non-finite training loss
    """
    errors = train_config.validate()
    if errors:
        raise InputError("; ".join(errors))
    check_overlap(train_config.window, train_config.overlap)
    if train_config.window > model_config.max_positions:
        raise InputError(
            f"train window {train_config.window} exceeds max_positions={model_config.max_positions}"
        )
    train_docs = [d for d in train_docs if len(d.tokens) >= 2]
    if not train_docs or not valid_docs:
        raise InputError("training needs non-empty train and validation corpora")

    rng = Rng(train_config.seed)
    optimizer = optimizer or Adam()
    state = state or LoopState(next_validation=train_config.validate_every_tokens)
    best = best_params or dict(params)
    records: list[TrainRecord] = []
    started = time.perf_counter()
    stop = False

    def emit(record: TrainRecord) -> None:
        records.append(record)
        if on_record:
            on_record(record)

    def validate() -> float:
        nonlocal best
        val = validation_nll(model_config, params, valid_docs, train_config)
        if val < state.best_val_nll:
            state.best_val_nll = val
            best = dict(params)
            logger.info(f"New best validation NLL {val:.4f} at step {state.step}")
        else:
            logger.info(f"Validation NLL {val:.4f} at step {state.step}")
        return val

    def apply(batch: list[StepResult], final: bool) -> None:
        nonlocal params, stop
        state.step += 1
        lr = lr_schedule(state.step, train_config)
        scored = sum(r.scored_tokens for r in batch)
        train_nll, grads = accumulate(batch)
        if not math.isfinite(train_nll):
            logger.error(f"Non-finite training loss at step {state.step}; aborting")
            raise DivergenceError(f"training loss became {train_nll} at step {state.step}", state.step)
        grads, norm = clip_by_global_norm(grads, train_config.grad_clip)
        params = params_from_arrays(optimizer.apply(param_arrays(params), grads, lr))
        state.tokens_seen += scored
        logger.debug(f"step {state.step}: nll={train_nll:.4f} lr={lr:.3e} |g|={norm:.3e}")

        if train_config.max_steps is not None and state.step >= train_config.max_steps:
            stop = final = True
        val_nll = None
        if final or state.tokens_seen >= state.next_validation:
            val_nll = validate()
            while state.next_validation <= state.tokens_seen:
                state.next_validation += train_config.validate_every_tokens
        wallclock = (
            (time.perf_counter() - started) * 1000.0 if train_config.record_wallclock else None
        )
        emit(TrainRecord(state.step, state.tokens_seen, lr, train_nll, val_nll, wallclock))

    while state.epoch < train_config.epochs and not stop:
        order = rng.stream("shuffle", state.epoch).permutation(len(train_docs))
        while state.doc_cursor < len(order) and not stop:
            group = [
                train_docs[int(i)]
                for i in order[state.doc_cursor : state.doc_cursor + train_config.batch_size]
            ]
            last_group = (
                state.epoch == train_config.epochs - 1
                and state.doc_cursor + len(group) >= len(order)
            )
            # One lane per document, each with its own carry chain.
            lanes = [split_sequences(doc.tokens, train_config, pad=len(group) > 1) for doc in group]
            carries: list[Optional[np.ndarray]] = [None] * len(lanes)
            depth = max(len(lane) for lane in lanes)
            for j in range(depth):
                batch: list[StepResult] = []
                for k, lane in enumerate(lanes):
                    if j >= len(lane):
                        continue
                    seq = lane[j]
                    seq.initial_carry = carries[k]
                    result = sequence_step(seq, model_config, params, train_config.checkpointing)
                    carries[k] = result.final_carry
                    batch.append(result)
                apply(batch, final=last_group and j == depth - 1)
                if stop:
                    break
            state.doc_cursor += len(group)
            if on_document_end and not stop:
                on_document_end(state, params, optimizer, best)
        if not stop:
            state.epoch += 1
            state.doc_cursor = 0

    logger.info(
        f"Training finished after {state.step} steps, {state.tokens_seen} tokens; "
        f"best validation NLL {state.best_val_nll:.4f}"
    )
    return TrainResult(params, best, state.best_val_nll, records, state)
