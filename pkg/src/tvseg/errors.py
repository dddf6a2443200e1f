"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class UsageError(RuntimeError):
    """An API was called in a way its contract does not allow."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class VocabularyError(KeyError):
    """A token id or word is not in the vocabulary."""


class SpecError(ValueError):
    """A scene specification violates its invariants."""


class NumericalError(ArithmeticError):
    """A NaN/Inf was produced where finite values are required."""
