"""Exception types shared across the package."""


class BacklabError(Exception):
    """Base class for package errors."""


class FormatError(BacklabError):
    """Malformed on-disk data (bad record length, label byte out of range)."""


class CapabilityError(BacklabError):
    """A model lacks a capability an operation requires (feature taps, group norm)."""


class TrainingDivergedError(BacklabError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class SolverError(BacklabError):
    """An inner-maximization solver hit a non-finite loss or gradient."""


class DegenerateGradientError(BacklabError):
    """A gradient used for matching has zero norm."""


class AttackError(BacklabError):
    """Adaptive poison crafting failed (e.g. retraining diverged)."""

    def __init__(self, round_index: int, message: str = ""):
        self.round_index = round_index
        super().__init__(message or f"adaptive attack failed at round {round_index}")


class ConfigError(BacklabError):
    """Invalid or unknown experiment configuration."""
