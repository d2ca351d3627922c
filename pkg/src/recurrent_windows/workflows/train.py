"""Train Workflow - orchestrates a full fine-tuning run.

Flow:
  1. Load the train and validation corpora (validation reuses the train vocabulary)
  2. Resolve the model config and write the resolved ``run.toml``
  3. Initialize parameters, or restore ``last.ckpt`` when resuming
  4. Run the training loop, streaming the JSONL log and the ledger
  5. Write ``best.ckpt`` and the final resume state
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

from ..artifacts import RunArtifacts
from ..config import RunConfig
from ..core.optim import Adam
from ..core.rng import Rng
from ..corpus import Corpus, load_corpus
from ..errors import RecurrentWindowsError, VocabularyError
from ..model import ModelConfig, Params, init_params
from ..repository import Repository
from ..training import LoopState, TrainRecord, train_loop

logger = logging.getLogger(__name__)


@dataclass
class TrainOutcome:
    """Result of a training run."""
    run_id: Optional[int] = None
    output_dir: Optional[Path] = None
    steps: int = 0
    tokens_seen: int = 0
    best_val_nll: float = float("inf")
    best_checkpoint: Optional[Path] = None
    resumed: bool = False
    errors: List[str] = field(default_factory=list)


def resolve_vocab_size(run: RunConfig, corpora: List[Corpus]) -> int:
    """Vocabulary size from the config, the char vocabulary, or the largest token id.

    Raises:
        VocabularyError: A pinned ``model.vocab_size`` is smaller than a corpus id
    """
    max_id = max(c.max_token_id() for c in corpora)
    pinned = run.model.get("vocab_size")
    if pinned:
        if max_id >= pinned:
            raise VocabularyError(f"token id {max_id} exceeds model.vocab_size={pinned}")
        return int(pinned)
    vocab = corpora[0].vocab
    return vocab.size if vocab is not None else max_id + 1


class TrainWorkflow:
    """Runs ``train_loop`` against a resolved RunConfig and its run directory."""

    def __init__(self, run: RunConfig, repository: Optional[Repository] = None):
        """Initialize workflow.

        Args:
            run: Validated run configuration
            repository: Ledger (default: ``<output_dir>/ledger.db``)
        """
        self.run_config = run
        self.artifacts = RunArtifacts(run.output_dir)
        self.repo = repository or Repository(run.output_dir)

    def run(self, progress_callback: Optional[Callable[[str], None]] = None) -> TrainOutcome:
        """Execute the run.

        Args:
            progress_callback: Optional callback for progress updates

        Returns:
            TrainOutcome with step counts and checkpoint location

        Raises:
            RecurrentWindowsError: Data, config, checkpoint or divergence failures
                (the ledger row is marked failed first)
        """
        run = self.run_config
        outcome = TrainOutcome(output_dir=run.output_dir)

        def log_progress(msg: str):
            logger.info(msg)
            if progress_callback:
                progress_callback(msg)

        log_progress(f"Loading corpora ({run.data.format.value})...")
        train_corpus = load_corpus(run.data.train, run.data.format)
        valid_corpus = load_corpus(run.data.valid, run.data.format, vocab=train_corpus.vocab)
        config = run.model_config(resolve_vocab_size(run, [train_corpus, valid_corpus]))
        log_progress(
            f"{len(train_corpus)} train / {len(valid_corpus)} validation documents, "
            f"vocabulary {config.vocab_size}, {config.count_parameters(run.train.recurrent)} parameters"
        )

        toml_text = self.artifacts.write_run_config(
            run.to_dict(config.vocab_size), train_corpus.vocab
        )
        params, optimizer, state, best = self._initial_state(config, outcome)
        if outcome.resumed:
            log_progress(f"Resuming at step {state.step} (epoch {state.epoch})")
            self.artifacts.truncate_train_log(state.step)
        elif self.artifacts.train_log.exists():
            self.artifacts.train_log.unlink()

        ledger_run = self.repo.start_run(run.name, "train", run.seed, toml_text)
        outcome.run_id = int(ledger_run.id)
        last_tick = time.perf_counter()

        def on_record(record: TrainRecord) -> None:
            nonlocal last_tick
            now = time.perf_counter()
            self.artifacts.append_train_log([record])
            self.repo.add_train_record(ledger_run, record, wallclock_ms=(now - last_tick) * 1000.0)
            last_tick = now
            if record.val_nll is not None:
                log_progress(
                    f"step {record.step}: train {record.train_nll:.4f}, validation {record.val_nll:.4f}"
                )

        def on_document_end(state: LoopState, params: Params, optimizer: Adam, best: Params) -> None:
            self.artifacts.save_training_state(params, optimizer, state, best)

        log_progress(
            f"Training {run.train.mode.value} model: T={run.train.window}, overlap={run.train.overlap}, "
            f"{run.train.epochs} epochs"
        )
        try:
            result = train_loop(
                train_corpus.documents,
                valid_corpus.documents,
                config,
                run.train,
                params,
                optimizer=optimizer,
                state=state,
                best_params=best,
                on_record=on_record,
                on_document_end=on_document_end,
            )
        except RecurrentWindowsError as e:
            outcome.errors.append(str(e))
            logger.error(f"Training failed: {e}")
            self.repo.finish_run(ledger_run, status="failed", notes=str(e))
            raise

        self.artifacts.save_params(self.artifacts.best_ckpt, result.best_params)
        self.artifacts.save_training_state(result.params, optimizer, result.state, result.best_params)
        self.repo.finish_run(ledger_run, status="success", best_val_nll=result.best_val_nll)

        outcome.steps = result.state.step
        outcome.tokens_seen = result.state.tokens_seen
        outcome.best_val_nll = result.best_val_nll
        outcome.best_checkpoint = self.artifacts.best_ckpt
        log_progress("Training complete!")
        return outcome

    def _initial_state(self, config: ModelConfig, outcome: TrainOutcome):
        run = self.run_config
        recurrent = run.train.recurrent
        if run.resume and self.artifacts.last_ckpt.exists():
            outcome.resumed = True
            return self.artifacts.load_training_state(config, recurrent)
        if run.resume:
            logger.warning(f"No {self.artifacts.last_ckpt} to resume from; starting fresh")
        params = init_params(config, Rng(run.seed), recurrent=recurrent)
        return params, Adam(), None, None
