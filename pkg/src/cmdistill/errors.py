"""Exception hierarchy shared by every module.

The CLI maps each family to an exit code (see ``exit_code_for``).
"""


class CmdistillError(Exception):
    """Base class for all package errors."""


class DimensionError(CmdistillError, ValueError):
    pass


class NumericDomainError(CmdistillError, ValueError):
    pass


class ConfigError(CmdistillError, ValueError):
    pass


class DataError(CmdistillError, ValueError):
    pass


class UsageError(CmdistillError, ValueError):
    pass


class AlignmentError(DataError):
    """Transcript too long for the adapter's query budget."""


class TrainingError(CmdistillError, RuntimeError):
    pass


class FormatError(CmdistillError, ValueError):
    """Malformed checkpoint, manifest, or WAV file."""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DataError, FormatError, UsageError, DimensionError)):
        return 2
    if isinstance(exc, (TrainingError, NumericDomainError)):
        return 3
    if isinstance(exc, OSError):
        return 4
    return 1
