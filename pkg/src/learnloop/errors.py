"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit-code contract: validation problems exit 2,
numerical failures exit 3.
"""


class LearnLoopError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(LearnLoopError, ValueError):
    """Input violates a documented domain or precondition."""


class ShapeError(ValidationError):
    pass


class NoSignalError(ValidationError):
    pass


class OrderingError(ValidationError):
    """Events arrived out of timestamp order."""


class UnknownSkillError(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class ParameterDomainError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    pass


class ModelError(ValidationError):
    """Influence model configuration would break concavity."""


class InfeasibleError(ValidationError):
    def __init__(self, message: str, constraint: object = None):
        super().__init__(message)
        self.constraint = constraint


class IngestError(ValidationError):
    """Raised when row-level ingest errors exceed the configured maximum."""

    def __init__(self, message: str, errors: list | None = None):
        super().__init__(message)
        self.errors = errors or []


class SolverError(LearnLoopError, ArithmeticError):
    """Barrier method failed to converge."""
