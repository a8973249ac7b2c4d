"""Exception types shared across the package."""


class HoidetError(Exception):
    """Base class for all package errors."""


class ShapeError(HoidetError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateInputError(HoidetError, ValueError):
    """An input is degenerate (e.g. a zero-norm vector fed to a cosine)."""


class InputError(HoidetError, ValueError):
    """An input value is outside the operation's domain."""


class CapacityError(HoidetError, ValueError):
    """A scene exceeds the model's slot capacity."""


class ConfigError(HoidetError, ValueError):
    """A configuration is internally inconsistent or unsatisfiable."""


class ParseError(HoidetError, ValueError):
    """A persisted file could not be parsed."""


class CheckpointError(HoidetError, ValueError):
    """A checkpoint archive is missing tensors or has wrong shapes."""


class EvaluationError(HoidetError, RuntimeError):
    """A numeric evaluation produced a non-finite value."""


class TrainingDiverged(HoidetError, RuntimeError):
    """Training hit a non-finite loss or gradient."""
