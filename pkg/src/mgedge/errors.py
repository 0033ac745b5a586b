"""Exception types shared across the toolkit."""


class MgedgeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MgedgeError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigError(MgedgeError, ValueError):
    """A configuration value is out of its legal range."""


class InputError(MgedgeError, ValueError):
    """An argument value is outside the operation's domain."""


class ProviderLoadError(MgedgeError, RuntimeError):
    """The pretrained feature provider could not be constructed."""


class CheckpointError(MgedgeError, RuntimeError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class TrainingDiverged(MgedgeError, RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
