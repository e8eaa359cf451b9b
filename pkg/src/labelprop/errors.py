"""Exception and warning types shared across the package."""


class LabelPropError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(LabelPropError):
    """A file does not conform to its declared binary or line format."""


class DataError(LabelPropError):
    """Input data violates an invariant (non-finite values, bad labels, ...)."""


class ParamError(LabelPropError):
    """A configuration value or argument is out of its valid range."""


class SolverError(LabelPropError):
    """A numerical solve produced non-finite values and cannot continue."""


class TrainError(LabelPropError):
    """Classifier training diverged."""


class ConvergenceWarning(UserWarning):
    """A linear solve hit its iteration cap before reaching tolerance.

    The partially converged result is still returned; `final_residual`
    holds the residual norm at the point the solve stopped.
    """

    def __init__(self, message: str, final_residual: float):
        super().__init__(message)
        self.final_residual = final_residual
