"""Exception types shared across the package."""


class HJBKError(Exception):
    """Base class for all package errors."""


class InputError(HJBKError, ValueError):
    """Invalid user input: bad dimensions, invalid parameters, malformed configs."""


class NumericalError(HJBKError):
    """A numerical procedure produced an untrustworthy result."""


class SynthesisError(HJBKError):
    """Riccati or SDP synthesis failed (infeasible, nonconvergent, invariants violated)."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class BlowUpError(HJBKError):
    """A closed-loop trajectory diverged.

    ``failures`` is a list of ``(index, x0, time)`` tuples.
    """

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
