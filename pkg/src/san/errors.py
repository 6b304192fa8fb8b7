"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses without a lookup table.
"""


class SanError(Exception):
    exit_code = 1


class ConfigError(SanError, ValueError):
    """Invalid configuration value or inconsistent flags."""

    exit_code = 2


class ModeError(ConfigError):
    """Evaluation mode does not match the resolved split."""


class DataError(SanError):
    exit_code = 3


class FormatError(DataError):
    """Base class for binary file format failures."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class SplitError(DataError, ValueError):
    pass


class SamplingError(DataError, ValueError):
    pass


class ShapeError(SanError, ValueError):
    exit_code = 3


class StateError(SanError, RuntimeError):
    pass


class NumericError(SanError, ArithmeticError):
    exit_code = 4


class PrerequisiteError(SanError):
    exit_code = 5
