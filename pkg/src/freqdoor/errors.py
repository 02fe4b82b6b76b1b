"""Exception types shared across the package."""


class FreqdoorError(Exception):
    """Base class for package errors."""


class ConfigError(FreqdoorError):
    """Invalid configuration value or schema violation."""


class ShapeError(FreqdoorError):
    """Tensor shape or dimension mismatch."""


class NumericError(FreqdoorError):
    """Non-finite or otherwise invalid numeric value encountered."""


class DataError(FreqdoorError):
    """Dataset missing, empty, or unreadable."""


class TrainingDiverged(FreqdoorError):
    """Training loss became non-finite."""


class FrozenParameterDrift(FreqdoorError):
    """Parameters under the freeze contract changed during finetuning."""

    def __init__(self, drifted_names):
        self.drifted_names = list(drifted_names)
        super().__init__(
            "frozen parameters drifted: " + ", ".join(self.drifted_names)
        )


class SanityCheckFailed(FreqdoorError):
    """A prerequisite model failed its documented sanity threshold."""
