"""Exception hierarchy shared by every module."""


class AMCError(Exception):
    """Base class for all package errors."""


class ContractError(AMCError, ValueError):
    """A precondition on shapes, arguments or configuration was violated."""


class NumericError(AMCError, ArithmeticError):
    """A primitive produced NaN or Inf from finite inputs."""


class FormatError(AMCError):
    """A file does not follow the expected binary layout."""


class IntegrityError(AMCError):
    """A file is structurally valid but incomplete or inconsistent."""


class CalibrationError(AMCError):
    """Calibration cannot be fitted for the given data."""


class FingerprintError(AMCError):
    """A plugin was paired with a backbone it was not trained against."""
