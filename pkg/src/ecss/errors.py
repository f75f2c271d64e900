"""Exception types shared across the package."""
from __future__ import annotations


class ValidationError(ValueError):
    """Input or configuration that violates a documented precondition."""


class ConfigurationError(ValidationError):
    """Structurally invalid configuration object."""


class NoHistoryError(ValidationError):
    """Context window requested at the first turn of a conversation."""


class CorpusFormatError(ValidationError):
    """Malformed corpus record; carries the offending line and field."""

    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field '{field}': {message}")
        self.line = line
        self.field = field


class IngestionError(ValidationError):
    """External embedding file missing or inconsistent with the corpus."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or incompatible checkpoint file."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimization."""
