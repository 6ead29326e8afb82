"""Exception hierarchy shared across the package."""


class OmigaError(Exception):
    """Base class for all package errors."""


class ShapeError(OmigaError, ValueError):
    pass


class ParameterError(OmigaError, ValueError):
    pass


class UsageError(OmigaError, RuntimeError):
    pass


class NumericError(OmigaError, ArithmeticError):
    pass


class ConvergenceError(NumericError):
    pass


class ConsistencyError(OmigaError, ValueError):
    pass


class PreconditionError(OmigaError, ValueError):
    pass


class DivergentKLError(OmigaError, ValueError):
    """Policy puts mass where the behavior policy has none."""


class UnsupportedError(OmigaError, NotImplementedError):
    pass


class CompatibilityError(OmigaError, ValueError):
    pass


class DatasetError(OmigaError):
    pass


class ParseError(DatasetError, ValueError):
    pass


class IntegrityError(DatasetError, ValueError):
    pass


class VersionError(DatasetError, ValueError):
    pass
