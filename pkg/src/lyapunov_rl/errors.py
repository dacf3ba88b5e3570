class ContractViolation(ValueError):
    """Raised when an operation is called with arguments outside its contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(RuntimeError):
    """A training update produced a non-finite loss."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
