"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Model / scheme / training configuration is inconsistent."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class TapeError(RuntimeError):
    """Gradient tape misuse (double backward, cross-tape inputs, ...)."""


class FormatError(ValueError):
    """A file does not conform to its expected binary/text format."""


class SamplingError(ValueError):
    """Batch construction preconditions are violated."""


class GenerationError(RuntimeError):
    """Synthetic sample generation failed (e.g. figure out of frame)."""


class UsageError(ValueError):
    """Command line invoked with invalid arguments."""
