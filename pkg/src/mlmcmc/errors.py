"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the domain of an operation (non-finite values, bad sizes)."""


class LevelRangeError(IndexError):
    """Level index outside the hierarchy."""


class SolverError(RuntimeError):
    """Linear solver failed to converge."""


class InfeasibleLevelsError(RuntimeError):
    """No level up to ``L_max`` meets the bias constraint."""

    def __init__(self, message, min_tol):
        super().__init__(message)
        self.min_tol = min_tol


class ContinuationError(RuntimeError):
    """Continuation loop stopped without meeting the tolerance."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
