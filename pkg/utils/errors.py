"""
Exception hierarchy shared by the library and the command line.

Every project error carries the process exit code the CLI should use:
2 for configuration problems, 3 for data problems and 4 for numeric failures.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class NSPError(Exception):
    exit_code = 1


class ConfigError(NSPError, ValueError):
    exit_code = EXIT_CONFIG


class DataError(NSPError):
    exit_code = EXIT_DATA


class FormatError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    pass


class RowParseError(DataError, ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class NumericError(NSPError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class DomainError(NumericError, ValueError):
    pass


class ShapeError(NumericError, ValueError):
    pass


class EmptyReductionError(NumericError, ValueError):
    pass


class SingularSystemError(NumericError):
    pass


class InsufficientDataError(NumericError, ValueError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, breakdown=None) -> None:
        detail = f" ({breakdown})" if breakdown is not None else ""
        super().__init__(f"loss became non-finite at step {step}{detail}")
        self.step = step
        self.breakdown = breakdown


class ContractError(NSPError, RuntimeError):
    exit_code = EXIT_NUMERIC


class SampleRejected(Exception):
    """Raised when a frame cannot be split under the sampling constraints."""
