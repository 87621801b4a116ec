"""Exception types raised across the package."""


class CovarianceError(ValueError):
    """A covariance matrix failed its positive-definiteness check."""


class ConfigError(ValueError):
    """An experiment configuration field is missing or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
