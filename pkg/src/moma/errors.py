"""Exception hierarchy shared by every module in the package."""


class MomaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MomaError, ValueError):
    """Shapes of the operands do not agree."""


class WindowError(DimensionError):
    """A window specification does not tile the token grid."""


class ContractError(MomaError, ValueError):
    """A precondition of an operation was violated."""


class PatternError(MomaError, ValueError):
    """Malformed layer-pattern string.

    ``position`` is the zero-based character offset where parsing failed.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ConfigError(MomaError, ValueError):
    """Unknown or invalid configuration value."""


class DataError(MomaError, ValueError):
    """Invalid dataset content, e.g. a label outside the class range."""


class TrainingDiverged(MomaError, RuntimeError):
    """Raised when the loss becomes non-finite; ``dump_dir`` holds a parameter dump."""

    def __init__(self, message: str, dump_dir=None):
        super().__init__(message)
        self.dump_dir = dump_dir
