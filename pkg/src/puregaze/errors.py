"""Exception hierarchy shared by every puregaze module."""


class PureGazeError(Exception):
    """Base class; the CLI turns any subclass into exit status 1."""


class DomainError(PureGazeError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class ConfigurationError(PureGazeError):
    """A model or training configuration cannot be realized."""


class IngestionError(PureGazeError):
    """A manifest or checkpoint file violates its schema."""

    def __init__(self, message, offending=None):
        self.offending = list(offending or [])
        if self.offending:
            lines = "\n".join(f"  {item}" for item in self.offending[:20])
            more = len(self.offending) - 20
            if more > 0:
                lines += f"\n  ... and {more} more"
            message = f"{message}\n{lines}"
        super().__init__(message)


class ProbeFailure(PureGazeError):
    """A reconstruction probe produced a non-finite loss."""
