"""Exception hierarchy for recurrent-windows.

Every error carries the process exit code the CLI uses when it surfaces:
  2 - configuration problems
  3 - checkpoint problems
  4 - data problems
Kernel and runtime errors fall back to 1.
"""

from __future__ import annotations

from typing import Optional


class RecurrentWindowsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# --- CLI-facing categories ---


class ConfigError(RecurrentWindowsError, ValueError):
    """Run configuration is missing, malformed or inconsistent."""

    exit_code = 2

    def __init__(self, message: str, errors: Optional[list[str]] = None):
        super().__init__(message)
        self.errors = errors or []


class CheckpointError(RecurrentWindowsError):
    """Checkpoint container unreadable or incompatible with the model config."""

    exit_code = 3


class DataError(RecurrentWindowsError, ValueError):
    """Corpus or token stream problems."""

    exit_code = 4


class DataFormatError(DataError):
    """Malformed UTF-8 or truncated token-binary payload."""

    def __init__(self, message: str, byte_offset: int, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset
        self.path = path


class AlignmentError(DataError):
    """Token spans do not tile the source text."""


class VocabularyError(DataError):
    """Token id outside the model vocabulary."""


# --- Kernel and runtime errors ---


class DimensionError(RecurrentWindowsError, ValueError):
    """Array shapes do not agree."""


class ContextSizeError(DimensionError):
    """Window longer than the model's position table."""


class NumericDomainError(RecurrentWindowsError, ArithmeticError):
    """NaN or non-finite values where finite ones are required."""


class EmptyLossError(NumericDomainError, ValueError):
    """Loss requested over zero positions."""


class TracingError(RecurrentWindowsError, RuntimeError):
    """Gradient requested for a value that was not recorded on the tape."""


class PlanError(RecurrentWindowsError, ValueError):
    """Window plan inconsistent with the document or its own parameters."""


class InvalidOverlapError(PlanError):
    """Overlap outside 0 <= o <= T-1."""


class InputError(RecurrentWindowsError, ValueError):
    """Caller-supplied input unusable (empty prompt, short slice, ...)."""


class DivergenceError(RecurrentWindowsError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
