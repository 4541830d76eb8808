"""
Exception hierarchy shared by the library and the CLI.

Library code raises these; only `aroface.cli` turns them into exit codes.
"""

from typing import Any, Dict, Optional


class AroFaceError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(AroFaceError, ValueError):
    """A precondition or shape contract was not met by the caller."""


class ConfigError(AroFaceError, ValueError):
    """The run configuration is invalid or references missing inputs."""


class NumericalAbort(AroFaceError, ArithmeticError):
    """A non-finite loss or gradient appeared; the run cannot continue.

    `context` identifies where it happened (sample id, iteration, quantity).
    """

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.context = dict(context or {})
        if self.context:
            details = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ProjectionError(NumericalAbort):
    """Total landmark flow was not monotone along the projection ray."""


class DatasetError(AroFaceError, OSError):
    """Base class for dataset I/O failures; always names the path involved."""

    def __init__(self, message: str, path: Any):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class ManifestError(DatasetError):
    """manifest.jsonl or meta.json is malformed."""


class ShapeMismatchError(DatasetError):
    """A tensor file's dimensions disagree with its manifest row."""


class MissingFileError(DatasetError):
    """A file referenced by the manifest does not exist."""


class FileIntegrityError(DatasetError):
    """A tensor or checkpoint file is truncated or carries a bad magic."""
