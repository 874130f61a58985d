"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class WaveReprogError(Exception):
    exit_code = 1


class DimensionError(WaveReprogError, ValueError):
    exit_code = 2


class ConfigError(WaveReprogError, ValueError):
    exit_code = 2


class ManifestError(ConfigError):
    """A manifest failed validation (bad rows or missing files)."""


class ResourceError(WaveReprogError, RuntimeError):
    """A required external resource (e.g. pretrained weights) is unavailable."""

    exit_code = 3


class DataIOError(WaveReprogError, OSError):
    exit_code = 3


class DivergenceError(WaveReprogError, RuntimeError):
    exit_code = 4

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class CheckpointError(DataIOError):
    code = "checkpoint"


class CheckpointMagicError(CheckpointError):
    code = "bad-magic"


class CheckpointVersionError(CheckpointError):
    code = "version-mismatch"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointSchemaError(CheckpointError):
    code = "schema"
    exit_code = 2
