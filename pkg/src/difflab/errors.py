"""Exception hierarchy shared by all modules."""


class DifflabError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(DifflabError, ValueError):
    """Unknown kind, bad flag combination, malformed file or shape mismatch."""


class DomainError(DifflabError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class NumericalError(DifflabError, ArithmeticError):
    """A NaN/inf state, a diverging loss or a failed quadrature."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t
