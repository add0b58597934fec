"""Exception hierarchy shared by every module."""


class MoESimError(Exception):
    """Base class for all errors raised by moesim."""


class ConfigError(MoESimError, ValueError):
    """Inputs are inconsistent (shapes, ranges, incompatible settings)."""


class InfeasiblePlanError(ConfigError):
    """No legal placement exists under the requested constraints."""


class InvariantError(MoESimError, AssertionError):
    """An internal invariant was violated at runtime."""


class SchemaVersionError(MoESimError):
    """A persisted file carries an unsupported version tag."""


class ValidationError(MoESimError, ValueError):
    """A persisted file parsed but its content is invalid."""


class TraceFormatError(ValidationError):
    """A routing trace file is malformed; message carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
