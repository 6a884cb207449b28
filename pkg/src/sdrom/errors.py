"""Exception hierarchy shared by all sdrom modules."""


class SdromError(Exception):
    """Base class for every error raised by sdrom."""


class InvalidArgumentError(SdromError, ValueError):
    pass


class InvalidMetricError(InvalidArgumentError):
    """Gram operator is not symmetric positive definite on interior dofs."""


class DegenerateBasisError(SdromError, ArithmeticError):
    pass


class NumericFailure(SdromError, ArithmeticError):
    pass


class SolverFailure(SdromError, ArithmeticError):
    pass


class ConvergenceError(SdromError, RuntimeError):
    """Nonlinear iteration did not reach its tolerance.

    Parameters
    ----------
    step : int or None
        Time step index at which the iteration failed.
    residual : float
        Last residual norm.
    history : list of float
        Residual norms of every iteration.
    """

    def __init__(self, message, step=None, residual=float("nan"), history=()):
        super().__init__(message)
        self.step = step
        self.residual = residual
        self.history = list(history)


class FormatError(SdromError, ValueError):
    """Binary file has a bad magic, version or shape field."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TruncatedFileError(SdromError, OSError):
    pass
