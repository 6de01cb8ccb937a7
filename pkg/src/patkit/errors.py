"""Exception hierarchy shared across patkit."""


class PatkitError(Exception):
    """Base class for all library errors."""


class DimensionError(PatkitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PatkitError, ValueError):
    """A documented precondition was violated."""


class DomainError(PatkitError, ValueError):
    """Input lies outside an operation's mathematical domain."""


class ConfigError(PatkitError, ValueError):
    """Invalid model or run configuration."""


class FormatError(PatkitError, ValueError):
    """Malformed input file; message carries the offending location."""


class DivergenceError(PatkitError, RuntimeError):
    """Training produced a non-finite loss."""
