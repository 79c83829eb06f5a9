"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line can
translate failures without a lookup table.
"""


class IrabError(Exception):
    exit_code = 1


class ShapeError(IrabError, ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class ConfigError(IrabError, ValueError):
    """A configuration value or document is invalid."""


class DataError(IrabError):
    """Dataset or checkpoint files are missing, malformed or empty."""

    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericError(IrabError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    exit_code = 3
