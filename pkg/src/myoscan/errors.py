"""Exception types shared across the pipeline stages."""


class ParameterError(ValueError):
    """Invalid or infeasible parameters."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration bound."""


class DataError(RuntimeError):
    """Missing, inconsistent or unusable pipeline inputs."""
