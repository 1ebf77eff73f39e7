"""Exception hierarchy shared by all modules."""


class TTCAError(Exception):
    """Base class for errors raised by ttca."""


class ConfigurationError(TTCAError, ValueError):
    """Invalid option combination or unsupported shape."""


class StructureError(TTCAError, ValueError):
    """Cores with inconsistent ranks or mismatched mode sizes."""


class NumericalError(TTCAError, ArithmeticError):
    """A factorization failed or a matrix is too close to singular."""


class RankDeficientError(NumericalError):
    def __init__(self, message, rank):
        super().__init__(message)
        self.rank = rank


class IllConditionedError(NumericalError):
    def __init__(self, message, dim=None, cond=None):
        super().__init__(message)
        self.dim = dim
        self.cond = cond


class DataError(TTCAError, ValueError):
    """An oracle produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ResourceError(TTCAError, MemoryError):
    """A densification would exceed the configured element cap."""


class FormatError(TTCAError, ValueError):
    """Bad magic bytes or a truncated archive."""


class BudgetExceededError(TTCAError, RuntimeError):
    """The sample budget cannot cover even a single sweep."""


class TrainingDivergedError(TTCAError, FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class TTCAWarning(UserWarning):
    """Non-fatal numerical event (rank reduction, maxvol non-convergence)."""


class DomainError(TTCAError, ValueError):
    """Argument outside the domain of a metric (for example a non-positive scale)."""
