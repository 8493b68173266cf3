"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/validation problems exit
with 2, I/O problems with 3 and numeric divergence with 4.
"""


class LagdynError(Exception):
    """Base class for all package errors."""


class UsageError(LagdynError):
    """Caller violated a precondition (bad dimension, bad config, bad name)."""


class DataFormatError(UsageError):
    """A data file failed to parse; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NumericError(LagdynError):
    """A computation produced a non-finite value."""


class GenerationError(NumericError):
    """Trajectory generation blew up; carries the trajectory index."""

    def __init__(self, message, trajectory_index):
        super().__init__(f"trajectory {trajectory_index}: {message}")
        self.trajectory_index = trajectory_index


class RolloutError(NumericError):
    """A rollout left the finite domain; carries the last finite step index."""

    def __init__(self, message, last_finite_step):
        super().__init__(f"{message} (last finite step: {last_finite_step})")
        self.last_finite_step = last_finite_step


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss; the last good parameters are retained."""

    def __init__(self, message, epoch, last_good_parameters=None):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.last_good_parameters = last_good_parameters
