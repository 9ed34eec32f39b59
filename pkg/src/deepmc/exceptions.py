"""Exception hierarchy shared by every module of the package."""


class DeepMCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DeepMCError, ValueError):
    pass


class ConfigError(DeepMCError, ValueError):
    """Bad configuration. ``key_path`` names the offending entry when known."""

    def __init__(self, message, key_path=None):
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)
        self.key_path = key_path


class DegenerateSpectrumError(DeepMCError, ValueError):
    pass


class NumericalFailureError(DeepMCError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergedError(DeepMCError, ArithmeticError):
    """Training produced a non-finite or runaway value.

    ``step`` is the iteration index, ``snapshot`` the last good snapshot
    (may be None if divergence happened before the first one).
    """

    def __init__(self, message, step=None, snapshot=None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot


class UnsupportedOperationError(DeepMCError, RuntimeError):
    pass


class UnsupportedSizeError(DeepMCError, ValueError):
    pass


class DataFormatError(InvalidInputError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
