"""Exception types shared across the package."""


class InputError(ValueError):
    """Bad user-facing input: files, configs, argument values."""


class NumericError(RuntimeError):
    """Numeric failure: NaN loss, rank-deficient solve, degenerate geometry."""


class DivergenceError(NumericError):
    """Pose optimization diverged after the learning-rate fallback."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class StaleCodesError(RuntimeError):
    """Field queried with bone transforms that do not match the cached codes."""
