"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without a lookup table.
"""


class IQMAEError(Exception):
    exit_code = 1


class ConfigError(IQMAEError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class ParameterError(ConfigError):
    pass


class ShapeError(IQMAEError, ValueError):
    exit_code = 2


class OversizeError(ShapeError):
    """A record does not fit in an empty pack."""


class DegenerateSignalError(IQMAEError, ValueError):
    exit_code = 4


class AliasingError(ParameterError):
    pass


class InsufficientDataError(ConfigError):
    pass


class InsufficientHistoryError(ConfigError):
    pass


class CorpusIOError(IQMAEError, IOError):
    exit_code = 3


class NumericError(IQMAEError, ArithmeticError):
    exit_code = 4


class PipelineError(IQMAEError, RuntimeError):
    exit_code = 4
