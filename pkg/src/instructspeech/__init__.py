"""Toolkit for building and scoring open-vocabulary speech-instruction datasets."""

__version__ = "0.1.0"

from .errors import BackendError, InputError, ToolkitError

__all__ = [
    "BackendError",
    "InputError",
    "ToolkitError",
    "__version__",
]
