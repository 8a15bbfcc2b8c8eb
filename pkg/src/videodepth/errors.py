"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class DatasetError(RuntimeError):
    """A dataset directory is missing files or internally inconsistent."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; carries the stage and iteration."""

    def __init__(self, stage: str, iteration: int, loss: float):
        super().__init__(
            f"training diverged in stage '{stage}' at iteration {iteration} "
            f"(loss={loss!r})"
        )
        self.stage = stage
        self.iteration = iteration
        self.loss = loss
