"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config errors exit 2, data
errors exit 3, external-tool failures exit 4.
"""


class FaceVQError(Exception):
    """Base class for all package errors."""


class ConfigError(FaceVQError):
    """Invalid configuration: bad values, unknown keys, inconsistent layout."""

    exit_code = 2


class DataError(FaceVQError):
    """Invalid dataset or input data: missing frames, bad shapes, bad ranges."""

    exit_code = 3


class ExternalToolError(FaceVQError):
    """An external subprocess (codec) failed or is unavailable."""

    exit_code = 4


class ShapeError(DataError):
    """Tensor shape violates an operation's contract (named axis in message)."""


class TrainingStepError(FaceVQError):
    """A training step produced non-finite losses; message carries term dump."""
