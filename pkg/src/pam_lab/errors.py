"""Exception types shared across the package."""


class PamLabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PamLabError):
    """Arguments violate a documented precondition."""


class CutLocusError(PamLabError):
    """Geodesic interpolation requested across or at the cut locus."""


class TruncationError(PamLabError):
    """Spectral truncation too coarse for the requested evaluation.

    Carries the number of shells estimated to be sufficient in
    ``required_shells`` when that can be computed.
    """

    def __init__(self, message, required_shells=None):
        super().__init__(message)
        self.required_shells = required_shells


class DegenerateKernelError(PamLabError):
    """Heat-kernel denominator not positive at the requested arguments."""


class NonConvergenceError(PamLabError):
    """An iterative computation did not reach the requested tolerance."""
