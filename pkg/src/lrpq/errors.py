"""Exception types raised across the package."""


class LrpqError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(LrpqError, ValueError):
    pass


class ShapeMismatch(LrpqError, ValueError):
    pass


class RankDeficientDesign(LrpqError, ValueError):
    """Design matrix of a quantile regression lacks full column rank.

    ``context`` carries the row/column index of the failing regression when
    raised from the estimation stages.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class NegativeThreshold(LrpqError, ValueError):
    pass


class KOutOfRange(LrpqError, ValueError):
    pass


class ROutOfRange(LrpqError, ValueError):
    pass


class TooFewUnits(LrpqError, ValueError):
    pass


class InvalidConfig(LrpqError, ValueError):
    pass


class SingularVhat(LrpqError, ArithmeticError):
    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class SingularCovariance(LrpqError, ArithmeticError):
    pass


class NTooSmall(LrpqError, ValueError):
    pass


class UnbalancedPanel(LrpqError, ValueError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class DuplicateCell(LrpqError, ValueError):
    pass


class NonNumericField(LrpqError, ValueError):
    pass


class NotConvergedWarning(RuntimeWarning):
    """ADMM stopped at ``max_iter`` before meeting its tolerances."""
