"""Exception hierarchy shared by every module."""


class OmniFuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(OmniFuseError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(OmniFuseError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(OmniFuseError, ValueError):
    """An operation was called outside its documented preconditions."""


class StateError(OmniFuseError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


class PreprocessingError(OmniFuseError, ValueError):
    """An image does not match the geometry an encoder expects."""


class SequenceBudgetError(OmniFuseError, ValueError):
    """A spliced multimodal sequence exceeds the decoder's context length."""

    def __init__(self, length: int, max_len: int):
        super().__init__(f"sequence of {length} positions exceeds max_seq_len={max_len}")
        self.length = length
        self.max_len = max_len


class CheckpointFormatError(OmniFuseError, ValueError):
    """A checkpoint file is truncated, corrupted or not in OMNF1 format."""
