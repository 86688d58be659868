"""Combine an unbiased experimental estimate with a biased observational one.

Stratum-level effects from a randomized trial are shrunk toward estimates from
an observational study.  The shrinkage factors minimize an unbiased estimate of
the weighted squared-error risk, so the fused estimate tracks the trial when
the observational bias is large and borrows its precision when it is small.
"""

from .core import (
    DegenerateInputError,
    FusionInput,
    OracleSpec,
    ShrinkageOutput,
    ValidationError,
    WeightedLossSpec,
    weighted_loss,
)
from .shrinkage import ESTIMATOR_IDS, check_dominance_conditions, estimate

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "ESTIMATOR_IDS",
    "FusionInput",
    "OracleSpec",
    "ShrinkageOutput",
    "ValidationError",
    "WeightedLossSpec",
    "check_dominance_conditions",
    "estimate",
    "weighted_loss",
    "__version__",
]
