"""Differentially private first-order bilevel optimization."""
from .core import (
    AffineInner, BilevelProblem, Dataset, DimensionError, NumericalError, PreconditionError,
    PrivacyBudget, ProblemConstants, RunConfig, full_batch_gradient, minibatch_gradient,
)
from .geometry import ConvexSet
from .privacy import (
    BudgetExceededError, PrivacyLedger, add_gaussian_noise, advanced_composition,
    amplify_by_subsampling, calibrate_gaussian, ledger_record,
)

__version__ = "0.1.0"
