"""Exception hierarchy. The CLI maps each family onto an exit code."""


class BoundlessError(Exception):
    exit_code = 1


class ConfigError(BoundlessError, ValueError):
    """Invalid configuration or specification value."""

    exit_code = 2


class DataError(BoundlessError):
    """Missing, corrupt or inconsistent input data."""

    exit_code = 3


class CacheMissError(DataError, KeyError):
    pass


class CheckpointError(DataError):
    pass


class EmbeddingLoadError(DataError):
    """The embedding network's weights could not be loaded."""


class DegenerateEmbeddingError(DataError, ValueError):
    """A centred embedding has (numerically) zero norm."""


class NumericalAbort(BoundlessError):
    """A loss or gradient became non-finite during training."""

    exit_code = 4

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = dict(metrics or {})
