"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates the operation's preconditions."""


class InvalidActionError(ValueError):
    """An effector command exceeds the simulator's limits."""


class FormatError(ValueError):
    """A file does not match the expected binary or text layout."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


class PlanningFailedError(RuntimeError):
    """Every sampled action sequence was infeasible.

    ``best`` carries the least-bad plan so callers can still act on it.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best
