"""Self-supervised activity recognition with density-triggered active learning."""

from .errors import ConfigError, DataError, PipelineError, SelfActError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "PipelineError", "SelfActError", "__version__"]
