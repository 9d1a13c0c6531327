"""Shared exception taxonomy; the CLI maps these onto exit codes."""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class InputError(ToolkitError):
    """Bad configuration, files, or arguments (CLI exit code 2)."""


class BackendError(ToolkitError):
    """A model backend could not serve the run (CLI exit code 3)."""
