"""Exception hierarchy shared by the lattice, solver and analysis layers."""


class QBSDEJError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(QBSDEJError, ValueError):
    """Inputs violate a structural or domain constraint."""


class IntensityStepError(ConfigurationError):
    """A mark intensity is too large for the time step (lambda * h >= 1)."""

    def __init__(self, mark: int, intensity: float, step: float):
        self.mark = mark
        self.intensity = intensity
        self.step = step
        super().__init__(
            f"mark {mark}: intensity {intensity} times step {step} = "
            f"{intensity * step} is not < 1"
        )


class BudgetError(ConfigurationError):
    """The lattice would exceed the configured memory budget."""

    def __init__(self, required: int, budget: int):
        self.required = required
        self.budget = budget
        super().__init__(f"lattice needs {required} node-branches, budget is {budget}")


class StructuralError(QBSDEJError, ValueError):
    """Array shapes do not match the lattice layout."""


class PreconditionError(QBSDEJError, ValueError):
    """An operation was called outside its domain."""


class MeasureChangeError(QBSDEJError, ValueError):
    """A Doleans-Dade branch weight fell below the positivity floor."""

    def __init__(self, step: int, node: int, weight: float, floor: float):
        self.step = step
        self.node = node
        self.weight = weight
        super().__init__(
            f"measure change rejected at node ({step}, {node}): "
            f"branch weight {weight:.6g} <= floor {floor:.1e}"
        )


class ConvergenceError(QBSDEJError, ArithmeticError):
    """The implicit one-step solve did not converge."""

    def __init__(self, step: int, node: int, iterations: int):
        self.step = step
        self.node = node
        super().__init__(
            f"implicit step did not converge at node ({step}, {node}) "
            f"after {iterations} iterations"
        )


class PicardDivergence(QBSDEJError, ArithmeticError):
    """Picard iteration hit max_iters or blew up; carries the trace."""

    def __init__(self, message: str, trace):
        self.trace = trace
        super().__init__(message)


class StageError(QBSDEJError, ArithmeticError):
    """A stage of the splitting algorithm failed."""

    def __init__(self, stage: int, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")
