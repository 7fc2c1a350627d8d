"""Intertwiner groups of activation functions and their use in comparing networks."""
from .errors import ConfigError, IntertwinerError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "IntertwinerError", "NumericalError", "__version__"]
