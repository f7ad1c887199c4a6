"""Exception hierarchy shared by the services and the CLI.

Every error carries the process exit code the CLI should return for it.
"""
from __future__ import annotations


class BasinscopeError(Exception):
    exit_code: int = 2


class ConfigError(BasinscopeError):
    exit_code = 1


class DataError(BasinscopeError):
    exit_code = 2


class IngestionError(DataError):
    pass


class SplitError(DataError):
    pass


class AggregationError(DataError):
    """Chunk aggregation found gaps or duplicate run ids."""

    def __init__(self, message: str, missing=None, duplicates=None) -> None:
        super().__init__(message)
        self.missing = list(missing or [])
        self.duplicates = list(duplicates or [])


class ModelError(BasinscopeError):
    exit_code = 2


class AttributionError(BasinscopeError):
    exit_code = 2


class LandscapeError(BasinscopeError):
    exit_code = 2


class TotalDegeneracyError(LandscapeError):
    """All explanation rows coincide with their mean."""


class NoRepresentativesError(BasinscopeError):
    exit_code = 2


class IntegrityError(BasinscopeError):
    exit_code = 3
