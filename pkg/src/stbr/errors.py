"""Exception hierarchy shared by every stbr module.

The CLI maps these to exit codes: configuration/input problems exit 2,
artifact-compatibility problems exit 3, anything else exits 1.
"""


class STBRError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(STBRError, ValueError):
    """Invalid configuration value or violated parameter relation."""


class DimensionError(STBRError, ValueError):
    """Tensor shapes that do not line up."""


class ContractError(STBRError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateVectorError(STBRError, ArithmeticError):
    """l2-normalization of a (near) zero vector; usually a collapsed representation."""


class TrainingDivergenceError(STBRError, ArithmeticError):
    """Non-finite loss or gradient during optimization."""


class DataError(STBRError, ValueError):
    """Problem with input data files or dataset contents."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class AlignmentError(DataError):
    pass


class CoverageError(DataError):
    """Not enough observed data to compute something."""


class CheckpointError(STBRError):
    """A checkpoint or ridge artifact could not be loaded."""


class CompatibilityError(CheckpointError):
    """An artifact was produced under a different configuration."""
