"""Exception hierarchy shared by every module of the package."""


class HeisenbergObsError(Exception):
    """Base class for all package errors."""


class ParameterError(HeisenbergObsError, ValueError):
    """An input parameter is outside its admissible range."""


class InvalidGridError(ParameterError):
    pass


class AliasingError(ParameterError):
    pass


class DomainError(ParameterError):
    pass


class TruncationError(ParameterError):
    pass


class DegenerateInputError(ParameterError):
    """The input makes a quotient undefined (e.g. an identically zero solution)."""


class NumericError(HeisenbergObsError, ArithmeticError):
    """A numerical routine failed or produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConditioningError(NumericError):
    pass


class CertificationError(NumericError):
    pass
