"""Exception hierarchy shared by every stdplm module."""


class StdPlmError(Exception):
    """Base class for all library errors."""


class ShapeError(StdPlmError, ValueError):
    """Array shapes or widths are structurally inconsistent."""


class ValidationError(StdPlmError, ValueError):
    """Input values violate a precondition (range, sign, alignment, emptiness)."""


class NumericalError(StdPlmError, ArithmeticError):
    """A numerical routine failed or produced a non-finite result."""


class GraphMismatchError(StdPlmError):
    """The model's cached spectral basis was built for a different graph."""


class CheckpointMappingError(StdPlmError, KeyError):
    """Checkpoint weight names do not match the expected mapping table."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(StdPlmError, ValueError):
    """Configuration is invalid or incompatible with the data."""


class TrainingDivergedError(StdPlmError, RuntimeError):
    """Training produced a non-finite loss."""


class RunLockedError(StdPlmError, RuntimeError):
    """Another process holds the run directory lock."""
