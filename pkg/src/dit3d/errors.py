"""Exception hierarchy shared across the package."""


class Dit3DError(Exception):
    pass


class DimensionError(Dit3DError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(Dit3DError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(Dit3DError, ValueError):
    """Invalid configuration value."""


class NumericError(Dit3DError, ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


class FormatError(Dit3DError, IOError):
    """Checkpoint file is malformed."""


class ParseError(Dit3DError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class TransferError(Dit3DError, ValueError):
    pass


class ScaleError(Dit3DError, ValueError):
    """Normalization is undefined for degenerate data."""
