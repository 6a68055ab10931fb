"""Exception hierarchy. The CLI maps these to exit codes."""


class SapoError(Exception):
    exit_code = 1


class ConfigError(SapoError, ValueError):
    exit_code = 2


class ValidationError(SapoError, ValueError):
    exit_code = 2


class ContractError(SapoError, ValueError):
    """A caller broke a precondition (wrong length, empty input, ...)."""

    exit_code = 2


class ShapeError(ContractError):
    pass


class DataFormatError(SapoError):
    exit_code = 3


class ParseError(DataFormatError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NumericError(SapoError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError):
    pass


class EvaluationError(SapoError):
    exit_code = 2


class BufferEmpty(SapoError):
    """Raised when sampling from an empty replay buffer."""
