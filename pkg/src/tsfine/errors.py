"""Exception types raised across the package."""


class TsFineError(Exception):
    """Base class for every error raised by tsfine."""


class NotSpd(TsFineError):
    """Matrix is not symmetric positive definite (regularization too small)."""


class RankDeficient(TsFineError):
    pass


class EmptyInput(TsFineError):
    pass


class ShapeMismatch(TsFineError, ValueError):
    pass


class NonFinite(TsFineError):
    """Simulation left the finite range.

    ``step`` is the first time index holding a non-finite value.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TooShort(TsFineError, ValueError):
    pass


class DegenerateTarget(TsFineError, ValueError):
    pass


class NonFiniteLoss(TsFineError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ConfigError(TsFineError, ValueError):
    pass


class ParseError(TsFineError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
