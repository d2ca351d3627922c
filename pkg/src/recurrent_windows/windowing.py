"""Window schedules and perplexity evaluation.

A plan covers a document of N tokens with windows of length T that advance
by a stride s = T - overlap. Window 1 scores targets 2..T+1; every later
window scores only its s freshest targets, so each target in 2..N is scored
exactly once. Spans are 1-based and inclusive throughout.

Example (N=24, T=10, overlap=3):
    inputs  [1:10]  [8:17]  [15:24]
    scored  [2:11]  [12:18] [19:24]
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .core.tensor import cross_entropy, no_tape, slice_rows
from .errors import AlignmentError, InputError, InvalidOverlapError, PlanError
from .model import ModelConfig, Params, forward_window

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "model",
    "mode",
    "T",
    "overlap",
    "ppl_token",
    "ppl_word",
    "flops_per_token",
    "scored_tokens",
    "scored_words",
)


class ExecutionMode(str, Enum):
    BASELINE = "baseline"
    RECURRENT = "recurrent"


@dataclass(frozen=True)
class WindowSpec:
    """One window: inclusive input span, inclusive scored-target span, carry edge.

    ``carry_from`` is the 0-based index of the window whose carry feeds this
    one, or None.
    """

    input_span: tuple[int, int]
    scored_span: tuple[int, int]
    carry_from: Optional[int] = None

    @property
    def length(self) -> int:
        return self.input_span[1] - self.input_span[0] + 1

    @property
    def scored_count(self) -> int:
        return self.scored_span[1] - self.scored_span[0] + 1

    def scored_targets(self) -> range:
        return range(self.scored_span[0], self.scored_span[1] + 1)

    def logit_rows(self) -> tuple[int, int]:
        """Half-open row range of this window's logits that predict the scored targets."""
        a = self.input_span[0]
        return self.scored_span[0] - a - 1, self.scored_span[1] - a


@dataclass(frozen=True)
class WindowPlan:
    n_tokens: int
    window: int
    overlap: int
    mode: ExecutionMode
    windows: tuple[WindowSpec, ...]

    @property
    def stride(self) -> int:
        return self.window - self.overlap

    def __len__(self) -> int:
        return len(self.windows)

    def scored_token_count(self) -> int:
        return sum(w.scored_count for w in self.windows)

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "window": self.window,
            "overlap": self.overlap,
            "mode": self.mode.value,
            "windows": [
                {
                    "input": list(w.input_span),
                    "scored": list(w.scored_span),
                    "carry_from": w.carry_from,
                }
                for w in self.windows
            ],
        }


def check_overlap(window: int, overlap: int) -> None:
    if window < 1:
        raise PlanError(f"window length must be >= 1, got {window}")
    if not 0 <= overlap <= window - 1:
        raise InvalidOverlapError(f"overlap {overlap} outside 0..{window - 1} for T={window}")


def make_plan(
    n_tokens: int, window: int, overlap: int, mode: ExecutionMode | str = ExecutionMode.BASELINE
) -> WindowPlan:
    """Windows covering ``n_tokens`` tokens so every target 2..N is scored once.

    Raises:
        InvalidOverlapError: overlap outside 0..T-1
        PlanError: N < 2
    """
    check_overlap(window, overlap)
    if n_tokens < 2:
        raise PlanError(f"a plan needs at least 2 tokens, got {n_tokens}")
    mode = ExecutionMode(mode)
    T, N = window, n_tokens
    s = T - overlap

    windows = [WindowSpec(input_span=(1, min(T, N)), scored_span=(2, min(T + 1, N)))]
    n = 1
    while windows[-1].scored_span[1] < N:
        n += 1
        start = 1 + s * (n - 1)
        windows.append(
            WindowSpec(
                input_span=(start, min(T + s * (n - 1), N)),
                scored_span=(T + 2 + s * (n - 2), min(T + 1 + s * (n - 1), N)),
                carry_from=n - 2 if mode is ExecutionMode.RECURRENT else None,
            )
        )
    return WindowPlan(n_tokens=N, window=T, overlap=overlap, mode=mode, windows=tuple(windows))


# ============================================================
# Word normalization
# ============================================================


def word_weights(text: str, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Number of whitespace-delimited words that begin inside each token.

    Args:
        text: Source text
        spans: Half-open character span of every token, in order

    Raises:
        AlignmentError: If the spans leave a gap, overlap, or miss the text ends
    """
    weights = np.zeros(len(spans), dtype=np.int64)
    expected = 0
    for i, (start, stop) in enumerate(spans):
        if start != expected or stop < start:
            raise AlignmentError(
                f"token {i} spans [{start}, {stop}) but the previous token ended at {expected}"
            )
        expected = stop
    if expected != len(text):
        raise AlignmentError(f"tokens cover {expected} of {len(text)} characters")

    starts = [
        j for j, ch in enumerate(text) if not ch.isspace() and (j == 0 or text[j - 1].isspace())
    ]
    bounds = np.array([stop for _, stop in spans], dtype=np.int64)
    for j in starts:
        weights[int(np.searchsorted(bounds, j, side="right"))] += 1
    return weights


def word_normalizer(
    text: str,
    spans: Sequence[tuple[int, int]],
    scored_targets: Optional[Iterable[int]] = None,
) -> int:
    """Words beginning inside the scored token positions (1-based; default all)."""
    weights = word_weights(text, spans)
    if scored_targets is None:
        return int(weights.sum())
    return int(sum(weights[t - 1] for t in scored_targets))


# ============================================================
# Evaluation
# ============================================================


@dataclass
class EvalReport:
    """Summed NLL and counts over the scored targets of one or more documents."""

    total_nll: float
    scored_token_count: int
    scored_word_count: int
    flops_per_token: float
    window: int
    overlap: int
    mode: ExecutionMode
    model: str = "model"
    documents: int = 1

    @property
    def ppl_token(self) -> float:
        return math.exp(self.total_nll / self.scored_token_count)

    @property
    def ppl_word(self) -> float:
        if self.scored_word_count == 0:
            return math.inf
        return math.exp(self.total_nll / self.scored_word_count)

    @property
    def mean_nll(self) -> float:
        return self.total_nll / self.scored_token_count

    def csv_row(self) -> dict[str, object]:
        return {
            "model": self.model,
            "mode": self.mode.value,
            "T": self.window,
            "overlap": self.overlap,
            "ppl_token": f"{self.ppl_token:.6f}",
            "ppl_word": f"{self.ppl_word:.6f}",
            "flops_per_token": f"{self.flops_per_token:.6e}",
            "scored_tokens": self.scored_token_count,
            "scored_words": self.scored_word_count,
        }

    @classmethod
    def combine(cls, reports: Sequence["EvalReport"], model: Optional[str] = None) -> "EvalReport":
        if not reports:
            raise InputError("cannot combine zero reports")
        first = reports[0]
        return cls(
            total_nll=sum(r.total_nll for r in reports),
            scored_token_count=sum(r.scored_token_count for r in reports),
            scored_word_count=sum(r.scored_word_count for r in reports),
            flops_per_token=first.flops_per_token,
            window=first.window,
            overlap=first.overlap,
            mode=first.mode,
            model=model or first.model,
            documents=sum(r.documents for r in reports),
        )


def window_nlls(
    doc: Sequence[int], plan: WindowPlan, config: ModelConfig, params: Params
) -> list[float]:
    """Summed NLL over each window's scored targets, threading carries in recurrent mode."""
    from .recurrence import recurrence_step

    if plan.n_tokens != len(doc):
        raise PlanError(f"plan built for {plan.n_tokens} tokens, document has {len(doc)}")
    if plan.window > config.max_positions:
        raise PlanError(f"plan window {plan.window} exceeds max_positions={config.max_positions}")

    tokens = list(doc)
    recurrent = plan.mode is ExecutionMode.RECURRENT
    carries: dict[int, object] = {}
    nlls = []
    with no_tape():
        for index, spec in enumerate(plan.windows):
            a, b = spec.input_span
            carry = carries.get(spec.carry_from) if spec.carry_from is not None else None
            acts = forward_window(tokens[a - 1 : b], carry, config, params)
            lo, hi = spec.logit_rows()
            targets = [tokens[t - 1] for t in spec.scored_targets()]
            nll = cross_entropy(slice_rows(acts.logits, lo, hi), targets, reduction="sum")
            nlls.append(nll.item())
            if recurrent and index + 1 < len(plan.windows):
                carries[index] = recurrence_step(acts, config, params, index + 1).h_prev
    return nlls


def evaluate(
    config: ModelConfig,
    params: Params,
    doc: Sequence[int],
    plan: WindowPlan,
    word_counts: Optional[Sequence[int]] = None,
    *,
    model: str = "model",
) -> EvalReport:
    """Score one document under ``plan``.

    Args:
        config: Model config
        params: Model parameters (must include recurrence.* in recurrent mode)
        doc: N token ids
        plan: Plan built for this N
        word_counts: Optional per-token word weights (see ``word_weights``); when
            absent, words are counted as tokens

    Raises:
        PlanError: Plan/document length mismatch
    """
    from .flops import flops_per_token

    nlls = window_nlls(doc, plan, config, params)
    targets = [t for spec in plan.windows for t in spec.scored_targets()]
    if word_counts is None:
        words = len(targets)
    else:
        if len(word_counts) != len(doc):
            raise PlanError(f"{len(word_counts)} word weights for {len(doc)} tokens")
        words = int(sum(word_counts[t - 1] for t in targets))
    return EvalReport(
        total_nll=float(sum(nlls)),
        scored_token_count=len(targets),
        scored_word_count=words,
        flops_per_token=flops_per_token(
            config, plan.window, plan.overlap, plan.mode is ExecutionMode.RECURRENT
        ),
        window=plan.window,
        overlap=plan.overlap,
        mode=plan.mode,
        model=model,
    )


def evaluate_corpus(
    config: ModelConfig,
    params: Params,
    documents: Sequence,
    window: int,
    overlap: int,
    mode: ExecutionMode | str,
    *,
    model: str = "model",
    workers: int = 1,
) -> EvalReport:
    """Evaluate every document independently and pool the counts.

    Documents shorter than 2 tokens are skipped with a warning. With
    ``workers > 1`` documents run in a thread pool; the result does not depend
    on the worker count.

    Raises:
        InputError: If no document is long enough to score
    """
    mode = ExecutionMode(mode)
    check_overlap(window, overlap)
    usable = []
    for doc in documents:
        if len(doc.tokens) < 2:
            logger.warning(f"Skipping document {doc.source_id}: fewer than 2 tokens")
            continue
        usable.append(doc)
    if not usable:
        raise InputError("no document has at least 2 tokens")

    def run(doc) -> EvalReport:
        plan = make_plan(len(doc.tokens), window, overlap, mode)
        return evaluate(config, params, doc.tokens, plan, doc.word_weights, model=model)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, usable))
    else:
        reports = [run(doc) for doc in usable]
    report = EvalReport.combine(reports, model=model)
    logger.info(
        f"Evaluated {report.documents} documents ({mode.value}, T={window}, o={overlap}): "
        f"ppl_token={report.ppl_token:.4f}"
    )
    return report
