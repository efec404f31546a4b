"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, data schema, or user input (CLI exit code 2)."""


class DataFormatError(ConfigError):
    """Malformed dataset file; message carries the offending line number."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite. Carries the partial training record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
