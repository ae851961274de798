"""Exception hierarchy shared by all graspplan modules."""


class GraspPlanError(Exception):
    """Base class for all package errors."""


class FrameError(GraspPlanError, ValueError):
    pass


class UnreachableError(GraspPlanError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class GripperLimitError(GraspPlanError, ValueError):
    pass


class InfeasibleGraspError(GraspPlanError, ValueError):
    pass


class SpecError(GraspPlanError, ValueError):
    """A phase specification is inconsistent with the robot limits."""


class NonConvergenceError(GraspPlanError):
    def __init__(self, message, residuals=None, result=None):
        super().__init__(message)
        self.residuals = residuals or {}
        self.result = result


class DeadlineError(GraspPlanError):
    def __init__(self, message, elapsed_ms=float("nan")):
        super().__init__(message)
        self.elapsed_ms = elapsed_ms


class ReplanInfeasibleError(GraspPlanError):
    pass


class IntegrationError(GraspPlanError, FloatingPointError):
    pass


class ParseError(GraspPlanError, ValueError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
