"""Exception types shared across the package."""


class BDLMError(Exception):
    """Base class for package errors."""


class DimensionError(BDLMError, ValueError):
    """Operand shapes are incompatible."""


class InvalidPatternError(BDLMError, ValueError):
    """An attention pattern leaves some query row with no admissible key."""


class EmptyLossError(BDLMError, ValueError):
    """A masked loss was requested over zero active positions."""


class ConfigError(BDLMError, ValueError):
    """Inconsistent model, geometry or decoding configuration."""


class CheckpointError(BDLMError, IOError):
    """Checkpoint file is malformed, truncated or of an unknown version."""


class TrainingDivergedError(BDLMError, FloatingPointError):
    """Loss or gradients became non-finite during training."""


class DecodeContractError(BDLMError, RuntimeError):
    """A decoding step was invoked in a state that violates its precondition."""
