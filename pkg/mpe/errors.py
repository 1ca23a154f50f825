"""
Exceptions raised by the toolkit.

Every error carries a short `kind` so the command line can print a single
machine-parseable line of the form `<kind>: <message>`.
"""


class MpeError(Exception):
    kind = "error"


class QuantDomainError(MpeError, ValueError):
    kind = "domain"


class DimensionMismatchError(MpeError, ValueError):
    kind = "dimension"


class IngestError(MpeError, ValueError):
    kind = "ingest"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CatalogMismatchError(MpeError):
    kind = "catalog_mismatch"


class FormatError(MpeError, ValueError):
    """Raised when a binary artifact has a bad magic, version or layout."""

    kind = "format"


class TrainingDivergedError(MpeError):
    kind = "diverged"


class MetricError(MpeError, ValueError):
    kind = "metric"


class ConfigError(MpeError, ValueError):
    kind = "config"


class MissingPrerequisiteError(MpeError):
    kind = "missing_prerequisite"
