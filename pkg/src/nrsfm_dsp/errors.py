"""Exception hierarchy shared by all solvers and the command line."""


class NrsfmError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this class."""

    exit_code = 1


class InvalidInput(NrsfmError, ValueError):
    exit_code = 2


class DegenerateGeometry(NrsfmError):
    exit_code = 3


class DegenerateMotion(NrsfmError):
    exit_code = 4


class NumericalFailure(NrsfmError):
    exit_code = 5


class IdWidthOverflow(NrsfmError):
    exit_code = 6


class CorruptStream(NrsfmError):
    exit_code = 7
