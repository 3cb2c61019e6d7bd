"""Shared exception types.

Every operational failure in the package raises a subclass of AlarmError so
the CLI can map failures to exit codes without catching bare exceptions.
"""


class AlarmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AlarmError):
    """An operation received an argument that violates its precondition."""


class InvalidSpecError(AlarmError):
    """An encoder spec is internally inconsistent."""


class FormatError(AlarmError):
    """A feature file's contents disagree with its own header or the spec."""


class SpecMismatchError(AlarmError):
    """A feature file is valid but does not match the requesting spec."""


class FeatureIOError(AlarmError):
    """A feature file could not be read."""


class BankError(AlarmError):
    """An encoder bank is missing roles or has duplicates."""


class RateError(AlarmError):
    """A frame stream arrived at the wrong token rate."""


class TooShortError(AlarmError):
    """Input sequence too short for the requested temporal operation."""


class TooLongError(AlarmError):
    """Assembled sequence exceeds the backbone context window."""


class InvalidSpanError(AlarmError):
    """A target span is empty or out of bounds at training time."""


class DivergedError(AlarmError):
    """Training produced a non-finite loss."""


class IncompatibleCheckpointError(AlarmError):
    """A checkpoint cannot be loaded into the requested model."""


class PipelineError(AlarmError):
    """A corpus-pipeline step failed after retries; the record is parked."""


class EmptyFilteredError(AlarmError):
    """All candidate prompts for a record were rejected by filtering."""


class OutOfRangeError(AlarmError):
    """A schedule or index query outside the valid range."""


class ParseError(AlarmError):
    """A manifest, corpus, or benchmark line failed to parse."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number
