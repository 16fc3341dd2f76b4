"""Exception hierarchy shared by every tarc_lab module."""


class TarcLabError(Exception):
    """Base class for all library errors."""


# --- linear algebra / certificates -------------------------------------------


class DimensionMismatch(TarcLabError, ValueError):
    pass


class NotSPD(TarcLabError, ValueError):
    """A matrix that must be symmetric positive definite is not."""


class NonHurwitz(TarcLabError, ValueError):
    """A matrix that must be Hurwitz has an eigenvalue with Re >= 0."""


class SingularSystem(TarcLabError, ArithmeticError):
    pass


class InfeasibleCertificate(TarcLabError):
    """Operation needs a feasible stability certificate (or a P matrix)."""


class NoFeasiblePoint(TarcLabError):
    pass


class BracketNotFound(TarcLabError):
    pass


class KernelOrderMismatch(TarcLabError, ValueError):
    pass


# --- derivative estimator ----------------------------------------------------


class OrderExceedsDegree(TarcLabError, ValueError):
    pass


class OutOfWindow(TarcLabError, ValueError):
    pass


class DegreeTooLarge(TarcLabError, ValueError):
    pass


class OddSubintervals(TarcLabError, ValueError):
    pass


class BufferCold(TarcLabError):
    """Not enough history has been buffered for the requested read."""


# --- plants / controllers / simulation ---------------------------------------


class NonPhysicalParams(TarcLabError, ValueError):
    pass


class IllConditionedInertia(TarcLabError, ArithmeticError):
    pass


class IllConditionedMhat(TarcLabError, ArithmeticError):
    pass


class NumericalBlowup(TarcLabError, ArithmeticError):
    pass


class EmptyTrace(TarcLabError, ValueError):
    pass


# --- configuration -----------------------------------------------------------


class ConfigError(TarcLabError, ValueError):
    """Invalid experiment configuration; the message names the offending key."""

    def __init__(self, key, message, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {message}")


class UnknownKey(ConfigError):
    pass
