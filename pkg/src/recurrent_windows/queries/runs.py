"""Runs Query - read-only view of the run ledger.

Backs the ``runs`` command: lists recorded runs with their outcome and
best validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import List, Optional

from ..repository import Repository


@dataclass
class RunSummary:
    """One ledger run, flattened for display."""
    run_id: int
    name: str
    command: str
    seed: int
    status: str
    best_val_nll: Optional[float]
    steps: int
    eval_rows: int
    started_at: datetime
    wallclock_ms: Optional[float]

    @property
    def is_finished(self) -> bool:
        return self.status != "running"


class RunsQuery:
    """Query for listing runs."""

    def __init__(self, repository: Repository):
        """Initialize query.

        Args:
            repository: Ledger repository for the output directory
        """
        self.repo = repository

    def list_runs(self, command: Optional[str] = None) -> List[RunSummary]:
        """Runs newest first, optionally filtered by command (train, eval, sweep)."""
        summaries = []
        for run in self.repo.list_runs(command):
            summaries.append(RunSummary(
                run_id=int(run.id),
                name=str(run.name),
                command=str(run.command),
                seed=int(run.seed),
                status=str(run.status),
                best_val_nll=float(run.best_val_nll) if run.best_val_nll is not None else None,
                steps=run.steps.count(),
                eval_rows=run.eval_rows.count(),
                started_at=run.started_at,
                wallclock_ms=float(run.wallclock_ms) if run.wallclock_ms is not None else None,
            ))
        return summaries

    def best_run(self) -> Optional[RunSummary]:
        """Finished training run with the lowest validation NLL."""
        trained = [
            s for s in self.list_runs("train")
            if s.status == "success" and s.best_val_nll is not None
        ]
        return min(trained, key=lambda s: s.best_val_nll, default=None)
