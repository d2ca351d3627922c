"""Eval and sweep workflows.

A sweep is the cross product of checkpoints, window sizes, overlaps and
execution modes. Each (checkpoint, T, overlap, mode) job is evaluated in a
thread pool against read-only parameter snapshots; rows come back in job
order whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

from ..artifacts import RunArtifacts, has_recurrence, load_params
from ..corpus import Corpus, CorpusFormat, load_corpus
from ..errors import CheckpointError, VocabularyError
from ..model import ModelConfig, Params
from ..repository import Repository
from ..windowing import CSV_HEADER, EvalReport, ExecutionMode, evaluate_corpus

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoadedModel:
    """A checkpoint with the config and vocabulary recorded next to it."""
    label: str
    path: Path
    config: ModelConfig
    params: Params
    recurrent: bool
    vocab: object = None

    @classmethod
    def load(cls, path: Path, label: Optional[str] = None) -> "LoadedModel":
        """Load ``path`` using the ``run.toml`` in its directory.

        Raises:
            CheckpointError: Missing run.toml, unreadable checkpoint or shape mismatch
        """
        path = Path(path)
        config, vocab = RunArtifacts(path.parent).load_model_config()
        recurrent = has_recurrence(path)
        params = load_params(path, config, recurrent)
        return cls(label or path.parent.name, path, config, params, recurrent, vocab)

    def load_corpus(self, path: Path, fmt: CorpusFormat | str) -> Corpus:
        """Tokenize an evaluation corpus the way this model was trained.

        Raises:
            CheckpointError: Raw text requested for a model trained on token ids
            VocabularyError: Token ids beyond the model's vocabulary
        """
        fmt = CorpusFormat(fmt)
        if fmt is CorpusFormat.RAW_TEXT and self.vocab is None:
            raise CheckpointError(f"{self.path}: no character vocabulary recorded for raw-text input")
        corpus = load_corpus(path, fmt, vocab=self.vocab)
        if corpus.max_token_id() >= self.config.vocab_size:
            raise VocabularyError(
                f"token id {corpus.max_token_id()} exceeds vocab_size={self.config.vocab_size}"
            )
        return corpus


@dataclass(frozen=True)
class EvalJob:
    model: LoadedModel
    window: int
    overlap: int
    mode: ExecutionMode

    def problem(self) -> Optional[str]:
        """Why this job cannot run, or None."""
        if not 0 <= self.overlap < self.window:
            return f"overlap {self.overlap} must lie in 0..{self.window - 1}"
        if self.window > self.model.config.max_positions:
            return f"window {self.window} exceeds max_positions={self.model.config.max_positions}"
        if self.mode is ExecutionMode.RECURRENT and not self.model.recurrent:
            return "checkpoint has no recurrence parameters"
        return None

    def skipped_row(self) -> dict[str, object]:
        return {
            "model": self.model.label,
            "mode": self.mode.value,
            "T": self.window,
            "overlap": self.overlap,
            "ppl_token": "",
            "ppl_word": "",
            "flops_per_token": "",
            "scored_tokens": "",
            "scored_words": "",
        }


@dataclass
class SweepResult:
    """Result of an eval or sweep."""
    rows: List[dict] = field(default_factory=list)
    reports: List[EvalReport] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    run_id: Optional[int] = None

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buffer.getvalue()


def build_jobs(
    models: Sequence[LoadedModel],
    windows: Iterable[int],
    overlaps: Iterable[int],
    modes: Iterable[ExecutionMode | str],
) -> List[EvalJob]:
    """Cross product in (model, T, overlap, mode) order."""
    windows, overlaps = list(windows), list(overlaps)
    modes = [ExecutionMode(m) for m in modes]
    return [
        EvalJob(model, T, o, mode)
        for model in models
        for T in windows
        for o in overlaps
        for mode in modes
    ]


class SweepWorkflow:
    """Evaluates a list of jobs on one corpus and records them in the ledger."""

    def __init__(
        self,
        corpus_path: Path,
        corpus_format: CorpusFormat | str = CorpusFormat.RAW_TEXT,
        repository: Optional[Repository] = None,
        workers: int = 1,
        command: str = "sweep",
    ):
        """Initialize workflow.

        Args:
            corpus_path: Evaluation corpus
            corpus_format: raw-text or token-binary
            repository: Ledger to record rows in (optional)
            workers: Thread-pool size for jobs
            command: Ledger command name (eval or sweep)
        """
        self.corpus_path = Path(corpus_path)
        self.corpus_format = CorpusFormat(corpus_format)
        self.repo = repository
        self.workers = max(1, workers)
        self.command = command

    def run(
        self,
        jobs: Sequence[EvalJob],
        seed: int = 0,
        progress_callback: Optional[Callable[[str], None]] = None,
    ) -> SweepResult:
        """Evaluate ``jobs``; invalid ones become warning rows with empty metrics.

        Raises:
            CheckpointError, DataError: Corpus cannot be read for a model
        """
        result = SweepResult()

        def log_progress(msg: str):
            logger.info(msg)
            if progress_callback:
                progress_callback(msg)

        corpora: dict[Path, Corpus] = {}
        for job in jobs:
            if job.model.path not in corpora:
                corpora[job.model.path] = job.model.load_corpus(self.corpus_path, self.corpus_format)

        runnable = []
        for job in jobs:
            problem = job.problem()
            if problem:
                logger.warning(f"Skipping {job.model.label} T={job.window} overlap={job.overlap}: {problem}")
                result.skipped.append(f"{job.model.label} T={job.window} overlap={job.overlap}: {problem}")
            else:
                runnable.append(job)
        log_progress(f"Evaluating {len(runnable)} of {len(jobs)} jobs on {self.corpus_path}...")

        def run_job(job: EvalJob) -> EvalReport:
            return evaluate_corpus(
                job.model.config,
                job.model.params,
                corpora[job.model.path].documents,
                job.window,
                job.overlap,
                job.mode,
                model=job.model.label,
            )

        if self.workers > 1 and len(runnable) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                reports = dict(zip(runnable, pool.map(run_job, runnable)))
        else:
            reports = {job: run_job(job) for job in runnable}

        ledger_run = None
        if self.repo is not None:
            ledger_run = self.repo.start_run(self.command, self.command, seed)
            result.run_id = int(ledger_run.id)
        for job in jobs:
            report = reports.get(job)
            if report is None:
                result.rows.append(job.skipped_row())
                continue
            result.reports.append(report)
            result.rows.append(report.csv_row())
            if ledger_run is not None:
                self.repo.add_eval_report(ledger_run, report)
        if ledger_run is not None:
            self.repo.finish_run(ledger_run, notes="; ".join(result.skipped) or None)
        log_progress(f"{len(result.reports)} rows evaluated, {len(result.skipped)} skipped")
        return result
