"""Exception hierarchy shared by every module.

Each class carries a stable CLI exit code so scripts can branch on failures.
"""


class MtnTmtError(Exception):
    exit_code = 1


class ConfigError(MtnTmtError, ValueError):
    exit_code = 2


class ContractError(MtnTmtError, ValueError):
    exit_code = 2


class ConformanceError(MtnTmtError, ValueError):
    """Shapes that do not fit together."""

    exit_code = 2


class StateError(MtnTmtError, RuntimeError):
    exit_code = 2


class FormatError(MtnTmtError, ValueError):
    exit_code = 3


class VocabError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class NumericError(MtnTmtError, ArithmeticError):
    exit_code = 4
