"""Exception hierarchy shared by every module of the package."""


class VilinError(Exception):
    """Base class for all errors raised by vilin."""


class UnassignedVariableError(VilinError, KeyError):
    """A graph variable was not given a value."""

    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"variable {self.name!r} is not assigned"


class EvaluationError(VilinError, ArithmeticError):
    """Domain error while evaluating an expression graph.

    ``node`` is the id of the offending node in the graph's node list.
    """

    def __init__(self, message, node=None, op=None, context=None):
        super().__init__(message)
        self.node = node
        self.op = op
        self.context = context

    def __str__(self):
        msg = self.args[0]
        if self.node is not None:
            msg = f"{msg} at node {self.node} ({self.op})"
        if self.context:
            msg = f"{msg} [{self.context}]"
        return msg


class StepError(VilinError):
    """Base class for failures of a single integrator step."""

    def __init__(self, message, residuals=(), step_index=None):
        super().__init__(message)
        self.residuals = list(residuals)
        self.step_index = step_index


class ConvergenceError(StepError):
    """Newton iteration did not reach the residual tolerance."""


class ConstraintError(StepError):
    """Newton iteration converged but the constraint residual is too large."""


class SingularityError(VilinError):
    """A matrix that must be inverted is (numerically) singular.

    ``kind`` is ``"M"`` for the implicit-function Jacobian and ``"S"`` for the
    constraint Schur complement.
    """

    def __init__(self, message, kind="M", det=None, condition=None, step_index=None):
        super().__init__(message)
        self.kind = kind
        self.det = det
        self.condition = condition
        self.step_index = step_index


class ScenarioError(VilinError):
    """A scenario or system description could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        if self.line is not None:
            return f"line {self.line}: {self.args[0]}"
        return self.args[0]
