"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SelfActError(Exception):
    exit_code = 3


class ConfigError(SelfActError, ValueError):
    """Bad configuration or usage."""

    exit_code = 1


class DataError(SelfActError, ValueError):
    """Unreadable or malformed input data."""

    exit_code = 2


class PipelineError(SelfActError, RuntimeError):
    """A pipeline stage could not complete."""

    exit_code = 3
