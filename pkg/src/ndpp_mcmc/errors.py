"""Exception types shared across the package."""


class NDPPError(Exception):
    """Base class for all package errors."""


class KernelFormatError(NDPPError):
    """Malformed, truncated or inconsistent kernel data."""


class NumericalError(NDPPError):
    """A quantity that must be (numerically) nonnegative or invertible is not."""


class SingularConditioningError(NumericalError):
    """The conditioning submatrix ``X_A W X_A^T`` is (numerically) singular."""


class RejectionLimitError(NDPPError):
    """The rejection-based up operator exceeded its rejection cap.

    ``rejections`` holds the number of rejected proposals and ``bound`` the
    expected-rejection bound for the offending conditioning set when it could
    be computed (``None`` otherwise).
    """

    def __init__(self, message, rejections, bound=None):
        super().__init__(message)
        self.rejections = rejections
        self.bound = bound


class BudgetExceededError(NDPPError):
    """An enumeration would exceed its hard size budget."""
