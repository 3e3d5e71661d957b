"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PolyfeedError(Exception):
    exit_code = 1


class ValidationError(PolyfeedError, ValueError):
    """Rejected input: wrong shapes, non-finite data, malformed files."""

    exit_code = 3


class ProvenanceError(ValidationError):
    """An expansion/archive does not belong to the system it is used with."""

    exit_code = 3


class NumericalError(PolyfeedError, ArithmeticError):
    exit_code = 4


class SynthesisError(NumericalError):
    """Riccati synthesis impossible, e.g. the pair (A, B) is not stabilizable."""

    def __init__(self, msg, eigenvalue=None):
        super().__init__(msg)
        self.eigenvalue = eigenvalue


class IterationError(NumericalError):
    """An iterative method failed to converge."""


class SolverError(NumericalError):
    """A linear tensor solve produced a residual above tolerance."""

    def __init__(self, msg, order=None):
        super().__init__(msg)
        self.order = order


class StudyError(NumericalError):
    """Not enough usable rows to fit convergence orders."""


class DivergenceError(PolyfeedError):
    """A trajectory left the basin of the feedback law."""

    exit_code = 5
