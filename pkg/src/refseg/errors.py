"""Exception hierarchy shared by every refseg module."""

from __future__ import annotations


class RefSegError(Exception):
    """Base class. ``stage`` and ``sample_id`` are filled in by the pipeline."""

    stage: str | None = None
    sample_id: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        tags = []
        if self.sample_id is not None:
            tags.append(f"sample={self.sample_id}")
        if self.stage is not None:
            tags.append(f"stage={self.stage}")
        return f"{msg} [{', '.join(tags)}]" if tags else msg


class DimensionMismatch(RefSegError, ValueError):
    pass


# masks
class CountsMismatch(RefSegError, ValueError):
    pass


class EmptyMask(RefSegError, ValueError):
    pass


# dataset
class DatasetError(RefSegError):
    pass


class SchemaError(DatasetError, ValueError):
    pass


class MissingImage(DatasetError, FileNotFoundError):
    pass


class DimMismatch(DatasetError, DimensionMismatch):
    pass


class NotFound(RefSegError, FileNotFoundError):
    pass


class EmptyProposalSet(DatasetError, ValueError):
    pass


# prompts
class EmptyExpression(RefSegError, ValueError):
    pass


# backends
class BackendError(RefSegError):
    pass


class BackendUnavailable(BackendError):
    pass


class MissingEntry(BackendUnavailable):
    """A precomputed-file backend has no record for the request."""


class BadResponse(BackendError):
    pass


class Timeout(BackendError, TimeoutError):
    pass


class EmptyText(BackendError, ValueError):
    pass


class BadResolution(BackendError, ValueError):
    pass


# scoring / evaluation
class DegenerateSum(RefSegError, ArithmeticError):
    pass


class EmptyInput(RefSegError, ValueError):
    pass


class ScoreBoundsViolation(RefSegError, ArithmeticError):
    pass


class EmptyAccumulator(RefSegError, ValueError):
    pass


# configuration / runs
class ConfigError(RefSegError, ValueError):
    pass


class ConfigMismatch(RefSegError):
    """Existing results were produced under a different configuration."""
