"""Exception hierarchy.

Three families map onto CLI exit codes: validation problems (2), solver
non-convergence (3) and identifiability failures (4).
"""


class PriorShiftError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(PriorShiftError, ValueError):
    exit_code = 2


class InvalidDistribution(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class AbsoluteContinuityViolation(ValidationError):
    def __init__(self, cells):
        self.cells = list(cells)
        preview = ", ".join(str(c) for c in self.cells[:5])
        more = "" if len(self.cells) <= 5 else f" (+{len(self.cells) - 5} more)"
        super().__init__(f"target puts mass where source has none: {preview}{more}")


class UnsupportedClass(ValidationError):
    pass


class UnsupportedFeature(ValidationError):
    pass


class UnsupportedStratum(ValidationError):
    pass


class UnsupportedClassInStratum(ValidationError):
    pass


class NotNormalized(ValidationError):
    pass


class UndefinedPosteriorMass(ValidationError):
    pass


class UndefinedRow(ValidationError):
    pass


class EmptySample(ValidationError):
    pass


class EmptyStratum(ValidationError):
    pass


class DegenerateInit(ValidationError):
    pass


class ZeroDenominator(ValidationError):
    pass


class SolverError(PriorShiftError, ArithmeticError):
    exit_code = 3


class NoConvergence(SolverError):
    pass


class InfeasibleSystem(SolverError):
    pass


class InconsistentSystem(SolverError):
    pass


class IdentifiabilityError(PriorShiftError):
    exit_code = 4


class SingularStratum(IdentifiabilityError):
    def __init__(self, stratum, rank, expected):
        self.stratum = stratum
        self.rank = rank
        self.expected = expected
        super().__init__(
            f"confusion matrix of stratum {stratum!r} has rank {rank} < {expected}"
        )


class UndefinedColumn(IdentifiabilityError):
    pass
