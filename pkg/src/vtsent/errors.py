"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: config errors → 2, data errors → 3,
everything else → 4.
"""


class VtsentError(Exception):
    """Base class for all package errors."""


class ConfigError(VtsentError):
    """Invalid or incomplete run configuration."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataError(VtsentError):
    """Malformed input data, missing features or broken invariants in a dataset."""


class ManifestError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
