"""Capsule-network classifier with reconstruction-based adversarial-input
detection, a defense-aware attack suite, and a desk-scale evaluation harness.
"""

from . import attacks, autodiff, datasets, detectors, evaluation, model, training
from .errors import (
    CapsDefenseError,
    ConfigurationError,
    FormatError,
    TrainingError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "attacks",
    "autodiff",
    "datasets",
    "detectors",
    "evaluation",
    "model",
    "training",
    "CapsDefenseError",
    "ConfigurationError",
    "FormatError",
    "TrainingError",
    "UsageError",
    "__version__",
]
