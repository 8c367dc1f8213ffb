"""Exception types shared across the package."""


class FSLError(Exception):
    """Base class for all package errors."""


class ShapeError(FSLError, ValueError):
    pass


class NumericalError(FSLError, ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(FSLError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph, ...)."""


class EpisodeError(FSLError, ValueError):
    """Not enough classes or samples to build the requested episode."""


class FormatError(FSLError, ValueError):
    """File does not look like an FSLT file."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ConfigError(FSLError, ValueError):
    pass
