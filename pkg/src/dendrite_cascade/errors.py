"""Exception hierarchy shared by the library and the CLI."""


class CascadeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CascadeError, ValueError):
    """Bad shapes, bad hyperparameters, unknown config keys."""


class UsageError(CascadeError, RuntimeError):
    """An API was called in the wrong state (e.g. backward twice)."""


class CheckpointError(CascadeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError, KeyError):
    pass


class CheckpointMismatchError(CheckpointError):
    """The file loads but holds a different model kind or architecture."""


class TrainingError(CascadeError):
    """Training diverged or could not start.

    ``stage`` names the cascade stage that failed (``d1``, ``d2``, ``hsr``).
    """

    def __init__(self, message, stage=None):
        self.stage = stage
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


class DataError(CascadeError):
    """Dataset missing, empty, or malformed."""
