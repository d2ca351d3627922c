"""Repository - single data access layer for the run ledger."""

from __future__ import annotations

import math
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from .models import LEDGER_FILENAME, EvalRow, Run, TrainStep, database, init_db


class Repository:
    """Single source of truth for ledger reads and writes."""

    def __init__(self, output_dir: Path):
        """Open (creating if needed) ``<output_dir>/ledger.db``."""
        self.path = Path(output_dir) / LEDGER_FILENAME
        init_db(self.path)

    # --- Runs ---

    def start_run(self, name: str, command: str, seed: int = 0, config_toml: Optional[str] = None) -> Run:
        return Run.create(name=name, command=command, seed=seed, config_toml=config_toml)

    def finish_run(
        self,
        run: Run,
        status: str = 'success',
        best_val_nll: Optional[float] = None,
        notes: Optional[str] = None,
    ) -> Run:
        """Mark a run finished and record its wall-clock duration."""
        now = datetime.now(timezone.utc)
        started = run.started_at
        if started.tzinfo is None:
            started = started.replace(tzinfo=timezone.utc)
        run.status = status
        run.finished_at = now
        run.wallclock_ms = (now - started).total_seconds() * 1000.0
        if best_val_nll is not None and math.isfinite(best_val_nll):
            run.best_val_nll = best_val_nll
        if notes:
            run.notes = notes
        run.save()
        return run

    def get_run(self, run_id: int) -> Optional[Run]:
        return Run.get_or_none(Run.id == run_id)

    def list_runs(self, command: Optional[str] = None) -> List[Run]:
        """Runs, newest first."""
        query = Run.select()
        if command:
            query = query.where(Run.command == command)
        return list(query.order_by(Run.started_at.desc(), Run.id.desc()))

    # --- Records ---

    def add_train_record(self, run: Run, record, wallclock_ms: Optional[float] = None) -> TrainStep:
        """Store a ``training.TrainRecord``.

        ``wallclock_ms`` overrides the record's own timing, which is null unless
        the run asked for it in the log.
        """
        return TrainStep.create(
            run=run,
            step=record.step,
            tokens_seen=record.tokens_seen,
            lr=record.lr,
            train_nll=record.train_nll,
            val_nll=record.val_nll,
            wallclock_ms=wallclock_ms if wallclock_ms is not None else record.wallclock_ms,
        )

    def add_train_records(self, run: Run, records) -> int:
        with database.atomic():
            for record in records:
                self.add_train_record(run, record)
        return len(records)

    def add_eval_report(self, run: Run, report) -> EvalRow:
        """Store a ``windowing.EvalReport``."""
        return EvalRow.create(
            run=run,
            model=report.model,
            mode=report.mode.value,
            window=report.window,
            overlap=report.overlap,
            ppl_token=report.ppl_token,
            ppl_word=report.ppl_word,
            flops_per_token=report.flops_per_token,
            scored_tokens=report.scored_token_count,
            scored_words=report.scored_word_count,
        )

    def get_run_records(self, run: Run) -> List[TrainStep]:
        return list(TrainStep.select().where(TrainStep.run == run).order_by(TrainStep.step))

    def get_eval_rows(self, run: Run) -> List[EvalRow]:
        return list(EvalRow.select().where(EvalRow.run == run).order_by(EvalRow.id))
