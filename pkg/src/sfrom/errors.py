"""Exception types shared across the package."""


class SfromError(Exception):
    """Base class for all package errors."""


class ConfigError(SfromError, ValueError):
    """Invalid configuration or input descriptor."""


class NotSplittableError(SfromError, ValueError):
    """A node set does not admit a separator (no seed with a proper neighbourhood)."""


class DegenerateRowError(SfromError, ValueError):
    """Interface row with nonzero diagonal but no off-diagonal couplings."""


class CornerSetError(SfromError, ValueError):
    """Corner node whose rows cannot be distributed over interface copies."""


class NumericalError(SfromError, ArithmeticError):
    """Base class for numerical failures (CLI exit code 3)."""


class SingularShiftError(NumericalError):
    """The requested frequency hits (or nearly hits) the pencil spectrum."""


class DeflationRequiredError(NumericalError):
    """Block Krylov or block Lanczos rank deficiency; deflation is not implemented."""


class StieltjesnessError(NumericalError):
    """An S-fraction coefficient is not symmetric positive definite."""


class InstabilityError(NumericalError):
    """Time stepping produced non-finite or exploding values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
