"""Exception hierarchy shared by every module.

Each top-level class carries the process exit code the CLI reports for it.
"""


class PhysUIEError(Exception):
    exit_code = 1


class ConfigError(PhysUIEError):
    """Invalid configuration, incompatible checkpoint, or bad tensor geometry."""

    exit_code = 2


class DataError(PhysUIEError):
    """Unreadable inputs, missing references, empty evaluation masks."""

    exit_code = 3


class ContractError(DataError, ValueError):
    """Shape or domain precondition of an operation was violated."""


class ValidationError(DataError, ValueError):
    """Input contains non-finite values."""


class SingularityError(DataError, ArithmeticError):
    def __init__(self, message: str, count: int = 0):
        super().__init__(message)
        self.count = count


class DivergenceError(PhysUIEError):
    """Raised when the training objective becomes non-finite."""

    exit_code = 4

    def __init__(self, message: str, step: int, last_report=None):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.last_report = last_report
