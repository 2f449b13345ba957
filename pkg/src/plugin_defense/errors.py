"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ConfigError(ValueError):
    """A model, attack or experiment configuration is inconsistent."""


class ParseError(ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingError(RuntimeError):
    """Training diverged or failed to reach its target within budget."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
