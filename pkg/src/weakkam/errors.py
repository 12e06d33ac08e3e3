"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent experiment setup."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual
