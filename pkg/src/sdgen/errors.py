"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, argument or shape. Maps to CLI exit code 2."""


class NumericError(RuntimeError):
    """Non-finite loss during optimization. Maps to CLI exit code 3."""

    def __init__(self, message, iteration=None, loss=None):
        super().__init__(f"{message} (iteration={iteration}, loss={loss})")
        self.iteration = iteration
        self.loss = loss


class ParseError(ValueError):
    """Malformed IDX file."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class CheckpointError(RuntimeError):
    """Unreadable, truncated or incompatible checkpoint. Maps to exit code 3."""


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written under a different config; pass force=True to load anyway."""
