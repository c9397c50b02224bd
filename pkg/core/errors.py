from typing import Optional


class DRHGError(Exception):
    """Base class for every error raised by the toolkit."""


class ValidationError(DRHGError, ValueError):
    """A solution or instance violates its invariants."""


class DomainError(DRHGError, ValueError):
    """An argument lies outside the domain of an operation."""


class ParseError(DRHGError, ValueError):
    """Malformed instance text."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class UnsupportedFormatError(DRHGError, ValueError):
    pass


class KindError(DRHGError, TypeError):
    """Operation called on the wrong problem kind (TSP vs CVRP)."""


class SizeError(DRHGError, ValueError):
    pass


class ConsistencyError(DRHGError, ValueError):
    """Two inputs that must describe the same object do not."""


class InfeasibleOrderError(DRHGError, ValueError):
    """A reduced order separates the endpoints of a hyper-edge."""


class ShapeError(DRHGError, ValueError):
    pass


class ConfigError(DRHGError, ValueError):
    pass


class DegenerateInputError(DRHGError, ValueError):
    pass


class InfeasibilityError(DRHGError, RuntimeError):
    """No feasible candidate is left to choose from."""


class TrainingAbort(DRHGError, RuntimeError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message)


class UsageError(DRHGError):
    """Invalid command-line flag combination."""
