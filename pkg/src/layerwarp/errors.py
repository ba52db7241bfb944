class LayerwarpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(LayerwarpError, ValueError):
    pass


class InvalidSizeError(LayerwarpError, ValueError):
    pass


class ShapeError(LayerwarpError, ValueError):
    pass


class FlowFormatError(LayerwarpError, ValueError):
    pass


class CheckpointError(LayerwarpError):
    pass


class ConfigError(LayerwarpError, ValueError):
    """Raised for malformed ``key=value`` config files.

    ``lineno`` and ``key`` point at the offending line when known.
    """

    def __init__(self, message, lineno=None, key=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno
        self.key = key


class BackendNotInstalledError(LayerwarpError, RuntimeError):
    pass


class NonFiniteLossError(LayerwarpError, FloatingPointError):
    pass
