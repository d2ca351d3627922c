"""Workflows package - orchestrators for multi-step operations.

Each workflow ties corpus loading, the numeric core, run artifacts and the
ledger together for one CLI command.
"""

from .evaluate import EvalJob, LoadedModel, SweepResult, SweepWorkflow, build_jobs
from .train import TrainOutcome, TrainWorkflow

__all__ = [
    'EvalJob',
    'LoadedModel',
    'SweepResult',
    'SweepWorkflow',
    'TrainOutcome',
    'TrainWorkflow',
    'build_jobs',
]
