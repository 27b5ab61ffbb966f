class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class UsageError(ValueError):
    """An API was called with arguments that do not fit the model or data."""


class DivergenceError(FloatingPointError):
    """Training produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
