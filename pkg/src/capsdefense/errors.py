"""Exception types shared across the package."""


class CapsDefenseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CapsDefenseError):
    """Bad shapes/hyperparameters detected while wiring operations together."""


class UsageError(CapsDefenseError):
    """Caller violated an API contract (wrong argument, missing state)."""


class FormatError(CapsDefenseError):
    """Malformed external file (dataset, checkpoint, config)."""


class TrainingError(CapsDefenseError):
    """Training diverged or hit a non-finite loss."""
