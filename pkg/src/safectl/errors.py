"""Exception types shared across the package."""


class SafeCtlError(Exception):
    """Base class for all errors raised by safectl."""


class DimensionMismatch(SafeCtlError, ValueError):
    pass


class NotPositiveDefinite(SafeCtlError, ArithmeticError):
    pass


class NoConvergence(SafeCtlError, RuntimeError):
    pass


class NonFiniteEvaluation(SafeCtlError, FloatingPointError):
    pass


class NonFiniteState(SafeCtlError, FloatingPointError):
    pass


class EmptyTightening(SafeCtlError, ValueError):
    pass


class NotContractive(SafeCtlError, ValueError):
    pass


class Infeasible(SafeCtlError, RuntimeError):
    pass


class RankDeficient(SafeCtlError, ArithmeticError):
    pass


class NonFiniteLoss(SafeCtlError, FloatingPointError):
    pass


class ConfigInvalid(SafeCtlError, ValueError):
    """Raised for malformed experiment configs; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IoError(SafeCtlError, OSError):
    """Raised when experiment outputs cannot be written or read."""
