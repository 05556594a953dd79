"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is an ordinary crash.
"""


class CmlLabError(Exception):
    """Base class for all package errors."""


class ConfigError(CmlLabError):
    """Invalid configuration, arguments, or preconditions."""


class DataError(CmlLabError):
    """Problems with input data files or referenced ids."""


class ParseError(DataError):
    """Malformed input file content."""


class SchemaError(DataError):
    """Structurally valid input missing required fields."""


class UnknownIdError(DataError):
    """Lookup of an entity/relation/concept id that was never registered."""


class MissingCellError(DataError):
    """A (task, position) cell has no run covering it."""


class MergeError(DataError):
    """Run directories with incompatible configurations."""


class NumericError(CmlLabError):
    """Numerical failure: non-finite values, degenerate inputs, and the like."""


class DimensionError(NumericError):
    """Shape mismatch between tensors."""


class DegenerateInputError(NumericError):
    """Input outside the operation's numeric domain (e.g. zero-norm vector)."""
