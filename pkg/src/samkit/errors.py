"""Exception hierarchy shared by every samkit module.

Each class carries the process exit code the CLI maps it to.
"""


class SamError(Exception):
    exit_code = 5


class ConfigError(SamError):
    exit_code = 2


class InvalidValue(SamError, ValueError):
    exit_code = 2


class EmptyInput(InvalidValue):
    pass


class ShapeMismatch(SamError, ValueError):
    exit_code = 5


class DimMismatch(ShapeMismatch):
    pass


class AlignmentError(SamError, ValueError):
    exit_code = 5


class IoError(SamError, OSError):
    exit_code = 3


class FormatError(IoError):
    pass


class UnsupportedDtype(FormatError):
    pass


class DegenerateEmbedding(InvalidValue):
    pass


class TooFewExperts(InvalidValue):
    pass


class TooFewPoints(InvalidValue):
    pass


class EmptyIntersection(SamError):
    pass


class DivergenceError(SamError, ArithmeticError):
    pass


class EndpointUnavailable(SamError):
    exit_code = 4


class RemoteError(SamError):
    exit_code = 4

    def __init__(self, status, message):
        super().__init__(f"remote error {status}: {message}")
        self.status = status
        self.message = message
