"""Exception hierarchy shared by every module of the package."""


class SfwError(Exception):
    """Base class for all errors raised by sfwcompress."""


class BudgetExceedsDimension(SfwError, ValueError):
    pass


class NonFiniteInput(SfwError, ValueError):
    pass


class InvalidPartition(SfwError, ValueError):
    pass


class ShapeMismatch(SfwError, ValueError):
    pass


class PowerIterationStalled(SfwError, RuntimeError):
    """Block power iteration ran out of iterations.

    The best iterate seen so far is kept on ``best`` (an ``SvdFactors``)
    so callers that can live with an approximate answer may still use it.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DegenerateDirection(SfwError, ArithmeticError):
    """The Frank-Wolfe direction ``v - theta`` vanished; the step is skipped."""


class InvalidBeta(SfwError, ValueError):
    pass


class HorizonExceeded(SfwError, ValueError):
    pass


class InfeasiblePoint(SfwError, ValueError):
    pass


class NonFiniteLoss(SfwError, FloatingPointError):
    pass


class UnknownMagic(SfwError, ValueError):
    pass


class TruncatedPayload(SfwError, ValueError):
    pass


class RankOutOfRange(SfwError, ValueError):
    pass


class ConfigError(SfwError, ValueError):
    pass
