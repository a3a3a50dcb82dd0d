"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MathDomainError(ValueError):
    """Numeric input outside the mathematical domain of an operation."""


class LabelError(ValueError):
    """Class label outside the supported label set."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class DegenerateInputError(ValueError):
    """Input is empty or otherwise too small to be meaningful."""


class TrainingStateError(RuntimeError):
    """Training-loop state invariant violated (e.g. stepping without gradients)."""


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""
