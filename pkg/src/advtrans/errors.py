"""Exception hierarchy shared by every module."""


class AdvTransError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(AdvTransError, ValueError):
    """Invalid configuration, unknown kind, or unusable surrogate choice."""


class DimensionError(AdvTransError, ValueError):
    """Shapes of operands do not agree."""


class ArgumentError(AdvTransError, ValueError):
    """An argument is outside its admissible range."""


class FormatError(AdvTransError):
    """A file or byte stream does not follow the expected binary layout."""
