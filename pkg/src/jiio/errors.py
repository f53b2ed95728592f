"""Exception and warning types shared across the package."""


class JiioError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(JiioError):
    pass


class SingularMatrix(JiioError):
    pass


class NoConvergence(JiioError):
    pass


class NonFiniteError(JiioError):
    """A computation produced NaN or Inf where finite values are required."""


class ZeroWeight(JiioError):
    pass


class DimensionTooLarge(JiioError):
    pass


class ParseError(JiioError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class UnknownKey(JiioError):
    pass


class MissingKey(JiioError):
    pass


class BadMagic(JiioError):
    pass


class TruncatedFile(JiioError):
    pass


class CorruptFooter(JiioError):
    pass


class DegenerateFit(UserWarning):
    """Near-zero variance encountered while fitting the post-hoc density."""
