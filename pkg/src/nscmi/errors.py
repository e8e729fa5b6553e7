"""Exception hierarchy shared across the package.

Two broad classes matter to callers (and to the CLI exit-code mapping):
``ValidationError`` for contract violations in the inputs, and
``NumericalError`` for computations that ran but failed (non-convergence,
infeasible configurations, degenerate strata).
"""


class NscmiError(Exception):
    """Base class for all package errors."""


class ValidationError(NscmiError, ValueError):
    """Inputs violate a documented precondition (bad shapes, values, names)."""


class NumericalError(NscmiError, ArithmeticError):
    """A numerical procedure failed: non-convergence, singularity, infeasibility."""


class ZeroMassError(NumericalError):
    """A conditional probability was requested on a zero-mass event."""


class CalibrationError(NumericalError):
    """Moment calibration did not converge or hit a singular Jacobian."""


class FeasibilityError(NumericalError):
    """Requested parameters produce probabilities outside [0, 1]."""
