"""Exception hierarchy shared by every module of the package."""


class ADMError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(ADMError, ValueError):
    pass


class NotPositiveDefinite(ADMError, ValueError):
    pass


class NotPSD(ADMError, ValueError):
    pass


class NoConvergence(ADMError, RuntimeError):
    pass


class NumericalError(ADMError, ArithmeticError):
    pass


class NonFinite(ADMError, ValueError):
    pass


class NonFiniteGradient(NonFinite):
    pass


class FormatError(ADMError, ValueError):
    """Malformed or truncated ADMD file."""


class InvalidSpec(ADMError, ValueError):
    pass


class KTooLarge(ADMError, ValueError):
    pass


class MissingContext(ADMError, ValueError):
    pass


class DataShapeError(ADMError, ValueError):
    """Data does not have the shape an operation needs (CLI exit code 4)."""


class InconsistentDim(DataShapeError, FormatError):
    pass


class TooFewClasses(DataShapeError):
    pass


class InsufficientClasses(DataShapeError):
    pass


class InsufficientImages(DataShapeError):
    pass
