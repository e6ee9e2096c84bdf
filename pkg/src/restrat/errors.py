"""Exception hierarchy shared across the toolkit."""


class RestratError(Exception):
    """Base class for all toolkit errors."""


class DomainError(RestratError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class AccuracyError(RestratError, ArithmeticError):
    """An iterative numerical routine failed to converge to tolerance."""


class SingularMatrix(RestratError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot.

    ``pivot`` is the zero-based index of the failing pivot, i.e. the
    coordinate direction that is (numerically) degenerate.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class SingularCovariance(RestratError, ArithmeticError):
    """A design-stage covariance matrix is singular.

    ``direction`` names the degenerate covariate direction (pivot index);
    ``stratum`` is set when the failure is stratum-specific.
    """

    def __init__(self, direction: int, stratum: int | None = None, message: str | None = None):
        self.direction = direction
        self.stratum = stratum
        if message is None:
            where = f" in stratum {stratum}" if stratum is not None else ""
            message = f"singular covariance{where}: degenerate covariate direction {direction}"
        super().__init__(message)


class PopulationError(RestratError, ValueError):
    """The population fails a hard validity requirement (error-level)."""


class CountExceedsCap(RestratError):
    """Exhaustive enumeration was requested but the design is too large."""

    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"design has {count} assignments, above the enumeration cap {cap}")


class AttemptsExhausted(RestratError, RuntimeError):
    """Rejection sampling hit the attempt limit without an acceptable draw."""

    def __init__(self, attempts: int, stratum: int | None = None):
        self.attempts = attempts
        self.stratum = stratum
        where = f" in stratum {stratum}" if stratum is not None else ""
        super().__init__(f"no acceptable assignment{where} after {attempts} attempts")


class EmptyArm(RestratError, ValueError):
    """A stratum has an empty treatment or control arm."""

    def __init__(self, stratum: int, arm: int):
        self.stratum = stratum
        self.arm = arm
        super().__init__(f"stratum {stratum} has no units in arm {arm}")


class InsufficientArm(RestratError, ValueError):
    """An arm has fewer than two units, so sample variances are undefined."""

    def __init__(self, stratum: int, arm: int):
        self.stratum = stratum
        self.arm = arm
        super().__init__(
            f"stratum {stratum}, arm {arm} has fewer than 2 units; variance estimation needs n >= 2"
        )


class MissingPotentialOutcomes(RestratError, ValueError):
    """An oracle computation needs both potential outcomes but they are absent."""


class ParseError(RestratError, ValueError):
    """An input file (CSV or config) could not be parsed."""
