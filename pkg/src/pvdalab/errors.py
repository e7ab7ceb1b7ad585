"""Exception hierarchy shared by the library and the command line."""


class PvdaError(Exception):
    """Base class for every error raised by pvdalab."""


class ConfigError(PvdaError, ValueError):
    """Invalid configuration value.

    ``field`` carries the dotted path of the offending key when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(PvdaError, ValueError):
    """A binary file could not be decoded."""


class MalformedHeaderError(FormatError):
    """Wrong magic bytes or an impossible header field."""


class ShapeMismatchError(FormatError):
    """Payload size disagrees with the shape declared in the header."""


class TruncatedPayloadError(FormatError):
    """The file ends before the declared payload does."""


class NumericalError(PvdaError, ArithmeticError):
    """Training produced a non-finite value."""
