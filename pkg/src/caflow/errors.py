"""Exception hierarchy shared by every caflow module."""


class CaflowError(Exception):
    """Base class for all errors raised by caflow."""


class ShapeError(CaflowError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CaflowError, ValueError):
    """A documented precondition on the call was violated."""


class DomainError(CaflowError, ValueError):
    """A numeric argument lies outside its valid domain."""


class ConfigError(CaflowError, ValueError):
    """A configuration value or file is invalid."""


class FormatError(CaflowError):
    """A feature file is malformed.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IngestionError(CaflowError):
    """External features could not be loaded."""


class NumericError(CaflowError, ArithmeticError):
    """A non-finite value appeared during optimisation."""


class MetricError(CaflowError, ValueError):
    """A metric is undefined for the given inputs."""
