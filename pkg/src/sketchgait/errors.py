"""Exception hierarchy shared by every pipeline stage."""


class SketchGaitError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2


class ParameterError(SketchGaitError, ValueError):
    exit_code = 1


class DataError(SketchGaitError, ValueError):
    exit_code = 2


class CorruptionError(DataError):
    pass


class ExternalToolError(SketchGaitError, RuntimeError):
    """Raised when an external detector hook misbehaves.

    ``diagnostics`` holds the captured stdout/stderr and the command line.
    """

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
