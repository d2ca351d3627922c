"""Queries package - read-only views of the run ledger."""

from .runs import RunsQuery, RunSummary

__all__ = ['RunsQuery', 'RunSummary']
