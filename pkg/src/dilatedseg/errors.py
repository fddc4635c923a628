"""Exception types raised across the package."""


class DilatedSegError(Exception):
    """Base class for all package errors."""


class ShapeError(DilatedSegError, ValueError):
    """Array shapes or volume geometries do not agree."""


class FormatError(DilatedSegError):
    """A file on disk is malformed or inconsistent."""


class ConfigError(FormatError):
    def __init__(self, message, lineno=None, path=None):
        self.message = message
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class WeightFileError(FormatError):
    """Base class for weight file decoding failures."""


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedPayloadError(WeightFileError):
    pass


class ShapeInconsistencyError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class NumericError(DilatedSegError, ArithmeticError):
    """Training produced a non-finite value."""


class LabelError(DilatedSegError, ValueError):
    """A label value lies outside the valid class range."""
