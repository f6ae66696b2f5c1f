"""Exception hierarchy shared across the simulator."""


class RingFedError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(RingFedError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class IngestionError(RingFedError):
    """A dataset file could not be read."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class ProtocolError(RingFedError):
    """An aggregation or exchange step received invalid input."""


class ReportingError(RingFedError):
    """Metrics could not be computed or written."""
