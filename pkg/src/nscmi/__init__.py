"""Multiple imputation for non-monotone missing binary data under the
no-self-censoring mechanism: loglinear generators, an FCS imputation engine
with sensitivity offsets, Rubin's-rules pooling, and an exact
population-level bias oracle.
"""

from .errors import (
    CalibrationError,
    FeasibilityError,
    NscmiError,
    NumericalError,
    ValidationError,
    ZeroMassError,
)
from .loglinear import (
    DeviationReport,
    JointTable,
    LoglinearSpec,
    TermKey,
    build_table,
    calibrate,
    conditional,
    marginal,
    mar_deviation,
    mcar_deviation,
    nsc_holds,
    sample,
    self_censoring_deviation,
)

__all__ = [
    "CalibrationError",
    "FeasibilityError",
    "NscmiError",
    "NumericalError",
    "ValidationError",
    "ZeroMassError",
    "DeviationReport",
    "JointTable",
    "LoglinearSpec",
    "TermKey",
    "build_table",
    "calibrate",
    "conditional",
    "marginal",
    "mar_deviation",
    "mcar_deviation",
    "nsc_holds",
    "sample",
    "self_censoring_deviation",
]

__version__ = "0.1.0"
