"""Exception hierarchy shared by all modules.

Errors split into two families so the command-line driver can map them to
exit codes: validation problems (bad input, bad configuration) and numerical
failures (a solver could not deliver its post-condition).
"""


class O2HopfError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(O2HopfError):
    """Input rejected before any computation."""


class NumericalError(O2HopfError):
    """A numerical routine failed to meet its post-condition."""


class InvalidInput(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, key=None, line=None, column=None):
        self.key = key
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}, column {column})"
        super().__init__(f"{message}{where}")


class GenericityViolation(NumericalError):
    """Cubic coefficients fail one of the nondegeneracy conditions."""


class BranchMismatch(NumericalError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class SingularJacobian(NumericalError):
    pass


class NoProfile(NumericalError):
    pass


class BlowUp(NumericalError):
    pass


class StepRejected(NumericalError):
    pass


class WeightOverflow(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class SplittingFailure(NumericalError):
    pass


class StiffnessFailure(NumericalError):
    pass


class ContourTooCoarse(NumericalError):
    pass


class RootOnContour(NumericalError):
    pass


class NoCrossing(NumericalError):
    pass


class MultiplicityAnomaly(NumericalError):
    pass


class ProjectionLeak(NumericalError):
    pass


class KernelDimensionMismatch(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class NoContraction(NumericalError):
    pass


class FitDegenerate(NumericalError):
    pass


class IoError(O2HopfError):
    """Reading or writing an artifact failed."""
