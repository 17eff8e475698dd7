"""Multiscale S-fraction reduced-order models for the scalar wave equation.

Modules
-------
fine_grid   finite-difference pencils ``(A, B)``, media and sources
partition   cell covers, splitting, corner removal
romgen      interface bases and per-cell S-fraction reduced models
msolver     coupled reduced system and leapfrog time stepping
reference   fine-grid leapfrog reference and dense oracles
archive     binary ROM archive
cli         command-line pipeline
"""

from .errors import (
    ConfigError,
    CornerSetError,
    DeflationRequiredError,
    DegenerateRowError,
    InstabilityError,
    NotSplittableError,
    NumericalError,
    SfromError,
    SingularShiftError,
    StieltjesnessError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CornerSetError",
    "DeflationRequiredError",
    "DegenerateRowError",
    "InstabilityError",
    "NotSplittableError",
    "NumericalError",
    "SfromError",
    "SingularShiftError",
    "StieltjesnessError",
    "__version__",
]
