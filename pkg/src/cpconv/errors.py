"""Exception types shared across the package."""


class SolverFailure(RuntimeError):
    """Every restart of a decomposition solver produced a non-finite result."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the offending epoch/batch."""

    def __init__(self, message: str, epoch: int, batch_index: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
