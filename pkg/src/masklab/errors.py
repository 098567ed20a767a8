"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad user-supplied input: shapes, ranges, parameters, config keys."""


class ShapeError(ValidationError):
    """Array dimensions do not line up; the message names the offending layer."""


class StaleCacheError(RuntimeError):
    """backward() was handed activations that did not come from a matching
    forward() on the current parameters."""


class NonFiniteError(RuntimeError):
    """A gradient, loss, or score went NaN/Inf; the message locates it."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss or gradient; carries the step index."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
