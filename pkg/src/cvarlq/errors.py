"""Exception types shared across the package."""


class CvarLqError(Exception):
    """Base class for all package errors."""


class ProblemError(CvarLqError, ValueError):
    """A single violated problem invariant."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class NotPositiveDefinite(ProblemError):
    def __init__(self, field):
        super().__init__(f"{field} is not symmetric positive definite", (field,))


class DimensionMismatch(ProblemError):
    def __init__(self, *fields, detail=""):
        msg = "dimension mismatch between " + ", ".join(fields)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, fields)


class BadHorizon(ProblemError):
    def __init__(self, N):
        super().__init__(f"horizon N must be a positive integer, got {N!r}", ("N",))


class InvalidProblem(CvarLqError, ValueError):
    """Raised when a problem fails validation; carries every violation found."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(e) for e in self.issues))


class NotInAmbiguitySet(CvarLqError, ValueError):
    pass


class ConditioningError(CvarLqError, ArithmeticError):
    """A factorization failed where theory says it cannot; reports the step."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class NoFeasibleGamma(CvarLqError):
    pass


class RNotIdentity(CvarLqError, ValueError):
    pass


class InnerMatrixNotPD(CvarLqError, ArithmeticError):
    pass


class CertificateFailed(CvarLqError, ArithmeticError):
    def __init__(self, min_eig, eps):
        super().__init__(f"LMI certificate failed: min eigenvalue {min_eig:.3e} < -{eps:.3e}")
        self.min_eig = min_eig


class BadAlpha(CvarLqError, ValueError):
    def __init__(self, alpha):
        super().__init__(f"alpha must lie in (0, 1], got {alpha!r}")


class Unsupported(CvarLqError):
    pass


class NonFiniteCost(CvarLqError, ArithmeticError):
    def __init__(self, trial):
        super().__init__(f"non-finite cumulative cost in trial {trial}")
        self.trial = trial
