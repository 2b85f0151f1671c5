"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid run configuration or hyperparameter combination."""


class DataError(ValueError):
    """Malformed, out-of-order, or structurally impossible input data."""


class StructuralError(DataError):
    """A referenced node/edge/sample does not exist."""


class NumericError(ArithmeticError):
    """Non-finite values or metrics undefined on the given input."""
