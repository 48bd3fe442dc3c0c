"""Verified-perturbation learning toolkit.

Monitor temporal-logic specifications over sampled signals, probabilistically
verify a black-box controller under bounded input perturbation, learn a
performance-improving policy constrained to the verified perturbation box,
and re-verify the learned policy.
"""

__version__ = "0.1.0"

from .boxes import IntervalBox
from .stl import (
    PredicateTable,
    Signal,
    format_formula,
    parse_formula,
    robustness,
    satisfies,
)
from .verify import (
    InitialSetTooLarge,
    RolloutFailure,
    VerificationReport,
    confidence,
    find_expansion_set,
    min_samples_for,
    probv,
)

__all__ = [
    "__version__",
    "IntervalBox",
    "PredicateTable",
    "Signal",
    "parse_formula",
    "format_formula",
    "satisfies",
    "robustness",
    "confidence",
    "min_samples_for",
    "probv",
    "find_expansion_set",
    "VerificationReport",
    "InitialSetTooLarge",
    "RolloutFailure",
]
