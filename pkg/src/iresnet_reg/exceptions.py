"""Exception types raised across the package."""


class IResNetError(Exception):
    """Base class for all package errors."""


class NotSymmetricError(IResNetError, ValueError):
    pass


class NoConvergenceError(IResNetError, RuntimeError):
    pass


class ZeroOperatorError(IResNetError, ValueError):
    pass


class DimMismatchError(IResNetError, ValueError):
    pass


class BudgetNotContractiveError(IResNetError, ValueError):
    """Raised when a Lipschitz budget L >= 1 is used where a contraction is required."""


class DegenerateModeError(IResNetError, ValueError):
    pass


class DatasetAssumptionError(IResNetError, ValueError):
    """The training data violates an assumption a closed-form solution relies on."""


class NonFiniteLossError(IResNetError, FloatingPointError):
    pass


class DegenerateGridError(IResNetError, ValueError):
    pass


class TooFewSamplesError(IResNetError, ValueError):
    pass


class BadMagicError(IResNetError, ValueError):
    pass


class TruncatedFileError(IResNetError, ValueError):
    pass


class CheckpointError(IResNetError, ValueError):
    pass
